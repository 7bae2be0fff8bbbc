# Deformation module
