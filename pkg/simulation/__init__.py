# Wave simulation package 