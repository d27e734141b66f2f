"""Learning weighted DAG connectivity for multi-stage networks."""

__version__ = "0.1.0"
