"""Neural solver for min-max vehicle routing (mTSP, mPDP, MDVRP, FMDVRP)."""

__version__ = "0.1.0"
