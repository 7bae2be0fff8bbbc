# Gaussians module
