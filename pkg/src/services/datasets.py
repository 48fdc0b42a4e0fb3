"""Trial datasets shipped with dosepool."""

import logging

import pandas as pd

from ..models.schemas import TrialData
from .extraction import TrialExtractionService

logger = logging.getLogger(__name__)

# Percentage change from baseline in EASI at week 12: least-squares means with
# their standard errors and the number of randomised patients per arm.
DUPILUMAB_ARMS = pd.DataFrame(
    {
        "schedule": ["weekly", "weekly", "biweekly", "biweekly", "monthly", "monthly"],
        "interval_hours": [168.0, 168.0, 336.0, 336.0, 672.0, 672.0],
        "dose": [0.0, 300.0, 200.0, 300.0, 100.0, 300.0],
        "response": [-18.1, -73.7, -65.4, -68.2, -44.8, -63.5],
        "se": [5.2, 5.2, 5.2, 5.1, 5.0, 4.9],
        "n": [61, 63, 61, 64, 65, 65],
    }
)

BUILTIN_DATASETS = {
    "dupilumab": DUPILUMAB_ARMS,
}


def load_builtin(name: str, reference_label: str = "biweekly") -> TrialData:
    key = name.strip().lower()
    if key not in BUILTIN_DATASETS:
        raise KeyError(f"Unknown built-in dataset '{name}' (available: {sorted(BUILTIN_DATASETS)})")
    service = TrialExtractionService(reference_label=reference_label)
    return service.trial_from_frame(BUILTIN_DATASETS[key].copy(), name=key, arm_level=True)
