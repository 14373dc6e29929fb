"""Multi-velocity video networks: spline velocity layers, 3-D convolutional
autoencoders, semi-supervised training and a synthetic gesture corpus."""
