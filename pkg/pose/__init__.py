# Pose module
