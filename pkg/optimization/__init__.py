# Optimization module
