# Fusion package
