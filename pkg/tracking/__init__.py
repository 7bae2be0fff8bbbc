# Tracking module
