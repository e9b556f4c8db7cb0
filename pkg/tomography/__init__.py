# Circular means transform package 