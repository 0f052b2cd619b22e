"""Numerical core: activations, Taylor-jet evaluation, PDE residuals and optimizers."""
