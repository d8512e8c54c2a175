"""
Export Module for Wild OOD
Writes run artifacts (tables as CSV, reports and summaries as JSON) with
deterministic formatting, so identical runs give identical bytes.
"""

import json
import math
import os
from typing import Any

import numpy as np
import pandas as pd

from wild_ood.logger import get_logger

logger = get_logger("export")

ARTIFACT_SCHEMA_VERSION = 1
FLOAT_FORMAT = '%.17g'


def to_jsonable(value: Any) -> Any:
    """
    Convert numpy scalars/arrays and tuples to plain JSON types

    Non-finite floats become None, since JSON has no infinity.
    """
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class ArtifactExporter:
    """
    Export run artifacts to an output directory
    """

    def __init__(self, output_dir: str = "outputs", activity_logger=None):
        """
        Initialize exporter

        Args:
            output_dir: Directory to save exported files
            activity_logger: Optional ActivityLogger notified of every export
        """
        self.output_dir = output_dir
        self.activity_logger = activity_logger

        # Create output directory if it doesn't exist
        if not os.path.exists(output_dir):
            os.makedirs(output_dir)
            logger.info(f"Created output directory: {output_dir}")

    def path(self, filename: str) -> str:
        return os.path.join(self.output_dir, filename)

    def _notify(self, export_format: str, filepath: str, record_count: int = None):
        if self.activity_logger is not None:
            self.activity_logger.log_export(export_format, filepath, record_count)
        else:
            logger.info(f"Exported {export_format}: {filepath}")

    def export_csv(self, data: pd.DataFrame, filename: str) -> str:
        """
        Export a table to CSV

        Args:
            data: DataFrame to export
            filename: Name of the output file (.csv is appended if missing)

        Returns:
            Path to the exported file
        """
        if not filename.endswith('.csv'):
            filename += '.csv'
        filepath = self.path(filename)
        data.to_csv(filepath, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self._notify("CSV", filepath, len(data))
        return filepath

    def export_json(self, payload: Any, filename: str) -> str:
        """
        Export a document to JSON with sorted keys and two-space indentation

        Args:
            payload: JSON-compatible document (numpy values are converted)
            filename: Name of the output file (.json is appended if missing)

        Returns:
            Path to the exported file
        """
        if not filename.endswith('.json'):
            filename += '.json'
        filepath = self.path(filename)
        with open(filepath, 'w', encoding='utf-8') as f:
            json.dump(to_jsonable(payload), f, indent=2, sort_keys=True, allow_nan=False)
            f.write("\n")
        self._notify("JSON", filepath)
        return filepath
