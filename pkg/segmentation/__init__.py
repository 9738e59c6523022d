# Segmentation engine package
