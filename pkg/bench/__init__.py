# Bench module
