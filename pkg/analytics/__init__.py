# Reconstruction reporting package 