# Data Processing module
