"""LSF-SAC: latent-message-assisted monotonic value factorization trained
with a multi-agent soft actor-critic, plus VDN/QMIX baselines."""

__version__ = "0.1.0"
