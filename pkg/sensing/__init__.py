# Sensing package
