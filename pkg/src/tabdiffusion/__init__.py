"""Denoising diffusion models for fixed-width tabular records."""
