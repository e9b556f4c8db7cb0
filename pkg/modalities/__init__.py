# Measurement models package 