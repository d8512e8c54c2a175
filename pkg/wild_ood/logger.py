"""
Logger Module for Wild OOD
Handles activity logging for data generation, training and evaluation runs
"""

import logging
import os
from datetime import datetime
from typing import Optional

ROOT_LOGGER_NAME = "wild_ood"

_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """
    Return a logger inside the package hierarchy

    Args:
        name: Short module name (e.g. 'alm'); None for the package logger

    Returns:
        logging.Logger named 'wild_ood' or 'wild_ood.<name>'
    """
    if name is None:
        return logging.getLogger(ROOT_LOGGER_NAME)
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{name}")


class ActivityLogger:
    """
    Logs experiment activities to a log file and the console
    """

    def __init__(self, log_dir: str = "logs", log_file: str = None,
                 console_level: int = logging.INFO):
        """
        Initialize logger

        Args:
            log_dir: Directory to store log files
            log_file: Name of log file (auto-generated if not provided)
            console_level: Minimum level echoed to the console
        """
        self.log_dir = log_dir
        os.makedirs(log_dir, exist_ok=True)

        if log_file is None:
            date_str = datetime.now().strftime("%Y%m%d")
            log_file = f"wild_ood_{date_str}.log"

        self.log_file = os.path.join(log_dir, log_file)

        self.logger = get_logger()
        self.logger.setLevel(logging.DEBUG)
        formatter = logging.Formatter(_FORMAT, datefmt=_DATE_FORMAT)

        # Attach each handler once per process, even if several runs share it
        target = os.path.abspath(self.log_file)
        has_file = any(
            isinstance(h, logging.FileHandler) and h.baseFilename == target
            for h in self.logger.handlers
        )
        if not has_file:
            file_handler = logging.FileHandler(self.log_file, encoding='utf-8')
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(formatter)
            self.logger.addHandler(file_handler)

        has_console = any(
            type(h) is logging.StreamHandler for h in self.logger.handlers
        )
        if not has_console:
            console_handler = logging.StreamHandler()
            console_handler.setLevel(console_level)
            console_handler.setFormatter(formatter)
            self.logger.addHandler(console_handler)

        self.logger.info("=" * 60)
        self.logger.info("Wild OOD Logger Initialized")
        self.logger.info(f"Log file: {self.log_file}")
        self.logger.info("=" * 60)

    def log_data_load(self, source_type: str, record_count: int, source_path: str = None):
        """
        Log data loading or generation

        Args:
            source_type: Kind of source (CSV, generator name)
            record_count: Number of samples loaded
            source_path: Path of the source file
        """
        message = f"Data loaded from {source_type}"
        if source_path:
            message += f" ({source_path})"
        message += f" - {record_count} samples"

        self.logger.info(message)

    def log_training_start(self, method: str, epochs: int, config_hash: str = None):
        """
        Log the start of a training run

        Args:
            method: Training method name
            epochs: Number of epochs requested
            config_hash: Short hash of the experiment config
        """
        message = f"Training started - Method: {method}, Epochs: {epochs}"
        if config_hash:
            message += f", Config: {config_hash}"

        self.logger.info(message)

    def log_epoch(self, epoch: int, ood_constraint: float, cls_constraint: float,
                  objective: float):
        """
        Log the end-of-epoch constraint values

        Args:
            epoch: Epoch index
            ood_constraint: Full-data ID OOD-constraint value
            cls_constraint: Full-data classification loss
            objective: Wild objective value
        """
        self.logger.info(f"Epoch {epoch} - ood={ood_constraint:.5f}, "
                         f"cls={cls_constraint:.5f}, objective={objective:.5f}")

    def log_evaluation(self, scorer: str, fpr: float, auroc: float, accuracy: float):
        """
        Log a detection report

        Args:
            scorer: Scoring rule used
            fpr: FPR at 95% TPR
            auroc: Area under the ROC curve
            accuracy: ID classification accuracy
        """
        self.logger.info(f"Evaluation ({scorer}) - FPR95: {fpr:.4f}, "
                         f"AUROC: {auroc:.4f}, Accuracy: {accuracy:.4f}")

    def log_export(self, export_format: str, filename: str, record_count: int = None):
        """
        Log an artifact export

        Args:
            export_format: Format of export (CSV, JSON)
            filename: Name of exported file
            record_count: Number of rows exported
        """
        message = f"Exported {export_format} - File: {filename}"
        if record_count is not None:
            message += f", Rows: {record_count}"

        self.logger.info(message)

    def log_error(self, error_message: str, exception: Exception = None):
        """
        Log an error

        Args:
            error_message: Description of the error
            exception: Exception object if available
        """
        if exception:
            self.logger.error(f"{error_message} - Exception: {str(exception)}")
        else:
            self.logger.error(error_message)

    def log_warning(self, warning_message: str):
        """Log a warning"""
        self.logger.warning(warning_message)

    def log_session_end(self):
        """Log end of session"""
        self.logger.info("=" * 60)
        self.logger.info("Session ended")
        self.logger.info("=" * 60)
