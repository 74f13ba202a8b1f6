"""Configuration management for the cloud overlay QoS harness."""

import logging
import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Config:
    """Harness settings read from the environment (or a .env file)."""

    def __init__(self):
        self.log_level = os.getenv("CLOUDQOS_LOG_LEVEL", "INFO").upper()
        self.output_dir = Path(os.getenv("CLOUDQOS_OUTPUT_DIR", "./results"))
        self.default_seed = self._int("CLOUDQOS_DEFAULT_SEED", 1)
        self.workers = self._int("CLOUDQOS_WORKERS", 1)
        self.event_detail = os.getenv("CLOUDQOS_EVENT_DETAIL", "standard").lower()

        # Egress $/GB; unset means the calibrated default of the cost model
        self.egress_price_raw = os.getenv("CLOUDQOS_EGRESS_PRICE", "")
        self.egress_price: Optional[float] = None
        if self.egress_price_raw:
            try:
                self.egress_price = float(self.egress_price_raw)
            except ValueError:
                pass  # reported by validate()

    @staticmethod
    def _int(name: str, default: int) -> int:
        raw = os.getenv(name)
        if raw is None or raw == "":
            return default
        try:
            return int(raw)
        except ValueError:
            logger.warning(f"⚠️ {name}={raw!r} is not an integer, using {default}")
            return default

    def validate(self) -> bool:
        """Check settings; problems are logged and make this return False."""
        problems = []
        warnings = []

        if self.log_level not in LOG_LEVELS:
            problems.append(f"CLOUDQOS_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {self.log_level}")
        if self.event_detail not in ("standard", "full"):
            problems.append(f"CLOUDQOS_EVENT_DETAIL must be 'standard' or 'full', got {self.event_detail}")
        if self.workers < 1:
            problems.append(f"CLOUDQOS_WORKERS must be at least 1, got {self.workers}")
        if self.egress_price_raw and self.egress_price is None:
            problems.append(f"CLOUDQOS_EGRESS_PRICE must be a number, got {self.egress_price_raw!r}")
        if self.egress_price is not None and self.egress_price < 0:
            problems.append(f"CLOUDQOS_EGRESS_PRICE must be non-negative, got {self.egress_price}")

        if self.workers > (os.cpu_count() or 1):
            warnings.append(f"CLOUDQOS_WORKERS ({self.workers}) exceeds the CPU count")
        if self.event_detail == "full":
            warnings.append("full event detail logs every transmit and arrival; event logs get large")

        if problems:
            for problem in problems:
                logger.error(f"❌ {problem}")
            return False
        for warning in warnings:
            logger.warning(f"⚠️ Warning: {warning}")
        return True


# Global config instance
config = Config()
