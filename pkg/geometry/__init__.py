# Geometry module
