# Phantom generation and image utilities package 