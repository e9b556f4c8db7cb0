# Special functions and quadrature package 