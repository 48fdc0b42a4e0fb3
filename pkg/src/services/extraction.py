import io
import json
import logging
import re
from pathlib import Path
from typing import Any, Optional

import pandas as pd
from pydantic import ValidationError

from ..core.config import settings
from ..core.errors import SchemaError
from ..core.validation import InputFileValidator
from ..models.schemas import (
    ArmSpec,
    ObservationKind,
    ObservationRow,
    Observations,
    Schedule,
    TrialData,
    TrialDesign,
)

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ('schedule', 'dose', 'response')


def normalize(col_name: str) -> str:
    return re.sub(r'[^a-z0-9]+', '', str(col_name).strip().lower())


class TrialExtractionService:
    """Reads trial data tables (CSV, Excel, JSON) into validated ``TrialData``.

    Row numbers in errors count data rows from 1, header excluded.
    """

    # Column mapping for common variations
    column_mapping = {
        'schedule': ['schedule', 'arm_schedule', 'regimen', 'frequency', 'schedule_label'],
        'interval_hours': ['interval_hours', 'interval', 'hours', 'freq_hours', 'frequency_hours'],
        'dose': ['dose', 'dose_level', 'dosage'],
        'response': ['response', 'value', 'mean', 'ls_mean', 'lsmean', 'y', 'outcome'],
        'se': ['se', 'sd_error', 'std_error', 'stderr', 'standard_error'],
        'n': ['n', 'n_patients', 'count', 'n_planned', 'size'],
    }

    def __init__(self, schedule_intervals: Optional[dict[str, float]] = None, reference_label: Optional[str] = None):
        self.schedule_intervals = {
            ' '.join(k.strip().split()).lower(): v
            for k, v in (schedule_intervals or settings.schedule_intervals).items()
        }
        self.reference_label = (reference_label or settings.reference_schedule).strip().lower()

    def load_trial(self, path: Path, arm_level: Optional[bool] = None) -> TrialData:
        path = Path(path)
        is_valid, error = InputFileValidator.validate_input_file(path)
        if not is_valid:
            raise SchemaError(error or f"Invalid input file: {path}")

        content = path.read_bytes()
        file_ext = path.suffix.lower()
        try:
            if file_ext == '.csv':
                df = self._read_csv(content)
            elif file_ext == '.xlsx':
                df = self._read_excel(content)
            elif file_ext == '.json':
                df = self._read_json(content)
            else:
                raise SchemaError(f"Unsupported trial data format: {file_ext}")
        except SchemaError:
            raise
        except Exception as e:
            logger.error(f"Error reading trial data from {path.name}: {str(e)}")
            raise SchemaError(f"Failed to parse {path.name}: {str(e)}") from e

        return self.trial_from_frame(df, name=path.stem, arm_level=arm_level)

    def load_design(self, path: Path) -> TrialDesign:
        """Design-only JSON input: ``{"schedules": [...], "arms": [...], "reference_schedule_id": 1}``"""
        path = Path(path)
        is_valid, error = InputFileValidator.validate_input_file(path)
        if not is_valid:
            raise SchemaError(error or f"Invalid input file: {path}")
        try:
            return TrialDesign.model_validate_json(path.read_bytes())
        except ValidationError as e:
            raise SchemaError(f"Invalid design file {path.name}: {e}") from e

    def _read_csv(self, content: bytes) -> pd.DataFrame:
        return pd.read_csv(io.BytesIO(content), skipinitialspace=True, engine="python")

    def _read_excel(self, content: bytes) -> pd.DataFrame:
        return pd.read_excel(io.BytesIO(content), engine="openpyxl")

    def _read_json(self, content: bytes) -> pd.DataFrame:
        try:
            data = json.loads(content.decode('utf-8-sig'))
        except json.JSONDecodeError as e:
            raise SchemaError(f"Invalid JSON format: {str(e)}") from e

        # Handle different JSON structures
        if isinstance(data, list):
            records = data
        elif isinstance(data, dict):
            records = data.get('rows') or data.get('data') or data.get('arms') or [data]
        else:
            raise SchemaError("Invalid JSON structure")
        return pd.DataFrame.from_records(records)

    def _resolve_columns(self, df: pd.DataFrame) -> dict[str, Any]:
        normalized_columns = {col: normalize(col) for col in df.columns}

        # Find actual column names
        actual_columns: dict[str, Any] = {}
        for field, possible_names in self.column_mapping.items():
            normalized_targets = {normalize(name) for name in possible_names}
            for col, norm in normalized_columns.items():
                if norm in normalized_targets:
                    actual_columns[field] = col
                    break

        for field in REQUIRED_FIELDS:
            if field not in actual_columns:
                raise SchemaError(f"Missing required column '{field}'", column=field)
        return actual_columns

    def _numeric(self, df: pd.DataFrame, column: Any, field: str, allow_missing: bool = False) -> pd.Series:
        raw = df[column]
        values = pd.to_numeric(raw, errors='coerce')
        bad = values.isna() & (raw.notna() if allow_missing else True)
        if bad.any():
            index = int(bad.to_numpy().nonzero()[0][0])
            raise SchemaError(f"Expected a number, got {raw.iloc[index]!r}", row=index + 1, column=field)
        return values

    def trial_from_frame(self, df: pd.DataFrame, name: str = "trial", arm_level: Optional[bool] = None) -> TrialData:
        if df.empty:
            raise SchemaError("Trial data has no rows")
        columns = self._resolve_columns(df)

        labels = [' '.join(str(v).strip().split()).lower() for v in df[columns['schedule']]]
        for index, label in enumerate(labels):
            if not label or label == 'nan':
                raise SchemaError("Schedule label is empty", row=index + 1, column='schedule')

        dose = self._numeric(df, columns['dose'], 'dose')
        response = self._numeric(df, columns['response'], 'response')
        for field, values in (('dose', dose), ('response', response)):
            bad = ~values.apply(lambda v: pd.notna(v) and abs(v) != float('inf'))
            if bad.any():
                raise SchemaError(f"{field} must be finite", row=int(bad.to_numpy().nonzero()[0][0]) + 1, column=field)
        negative = dose < 0
        if negative.any():
            raise SchemaError("Doses must be non-negative", row=int(negative.to_numpy().nonzero()[0][0]) + 1, column='dose')

        intervals = self._intervals(df, columns, labels)
        kind = self._observation_kind(df, columns, arm_level)

        se = None
        if kind == ObservationKind.ARM_LEVEL:
            se = self._numeric(df, columns['se'], 'se')
            not_positive = ~(se > 0)
            if not_positive.any():
                index = int(not_positive.to_numpy().nonzero()[0][0])
                raise SchemaError(f"Standard errors must be positive, got {se.iloc[index]}", row=index + 1, column='se')

        counts = None
        if 'n' in columns:
            counts = self._numeric(df, columns['n'], 'n', allow_missing=True)

        # schedules ordered by interval, ids dense from 0
        ordered = sorted(intervals.items(), key=lambda item: (item[1], item[0]))
        schedules = [Schedule(id=i, label=label, interval_hours=hours) for i, (label, hours) in enumerate(ordered)]
        ids = {s.label: s.id for s in schedules}

        if self.reference_label in ids:
            reference_id = ids[self.reference_label]
        else:
            reference_id = schedules[0].id
            logger.info(f"Reference schedule '{self.reference_label}' not in data; using '{schedules[0].label}'")

        rows = []
        arm_sizes: dict[tuple[int, float], int] = {}
        for index, label in enumerate(labels):
            key = (ids[label], float(dose.iloc[index]))
            if kind == ObservationKind.ARM_LEVEL:
                size = counts.iloc[index] if counts is not None and pd.notna(counts.iloc[index]) else 1
                arm_sizes[key] = int(size)
                rows.append(ObservationRow(schedule_id=key[0], dose=key[1], value=float(response.iloc[index]),
                                           se=float(se.iloc[index])))
            else:
                arm_sizes[key] = arm_sizes.get(key, 0) + 1
                rows.append(ObservationRow(schedule_id=key[0], dose=key[1], value=float(response.iloc[index])))

        arms = [ArmSpec(schedule_id=s, dose=d, n_planned=max(n, 1)) for (s, d), n in sorted(arm_sizes.items())]
        try:
            design = TrialDesign(schedules=schedules, arms=arms, reference_schedule_id=reference_id)
            trial = TrialData(design=design, observations=Observations(kind=kind, rows=rows), name=name)
        except ValidationError as e:
            raise SchemaError(f"Invalid trial: {e}") from e

        logger.info(
            f"Loaded '{name}': {len(rows)} {kind.value} rows, {len(schedules)} schedules, "
            f"{len(arms)} arms, reference '{design.reference.label}'"
        )
        return trial

    def _intervals(self, df: pd.DataFrame, columns: dict[str, Any], labels: list[str]) -> dict[str, float]:
        intervals: dict[str, float] = {}
        explicit = None
        if 'interval_hours' in columns:
            explicit = self._numeric(df, columns['interval_hours'], 'interval_hours', allow_missing=True)

        for index, label in enumerate(labels):
            if explicit is not None and pd.notna(explicit.iloc[index]):
                hours = float(explicit.iloc[index])
                if hours <= 0:
                    raise SchemaError("interval_hours must be positive", row=index + 1, column='interval_hours')
            elif label in self.schedule_intervals:
                hours = float(self.schedule_intervals[label])
            else:
                raise SchemaError(
                    f"Unknown schedule '{label}' and no interval_hours given "
                    f"(known: {sorted(self.schedule_intervals)})",
                    row=index + 1,
                    column='schedule',
                )
            if label in intervals and intervals[label] != hours:
                raise SchemaError(
                    f"Schedule '{label}' has conflicting intervals {intervals[label]} and {hours}",
                    row=index + 1,
                    column='interval_hours',
                )
            intervals[label] = hours
        return intervals

    def _observation_kind(self, df: pd.DataFrame, columns: dict[str, Any], arm_level: Optional[bool]) -> ObservationKind:
        has_se = 'se' in columns and df[columns['se']].notna().any()
        if arm_level is True and not has_se:
            raise SchemaError("Arm-level data need a non-empty 'se' column", column='se')
        if arm_level is False:
            if has_se:
                logger.warning("Ignoring the 'se' column for patient-level data")
            return ObservationKind.PATIENT_LEVEL
        return ObservationKind.ARM_LEVEL if has_se else ObservationKind.PATIENT_LEVEL
