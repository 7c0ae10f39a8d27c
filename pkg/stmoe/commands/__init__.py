

__all__ = [
    "train",
    "evaluate",
    "probe",
    "halt_sweep",
    "stats",
    "params",
    "base",
]
