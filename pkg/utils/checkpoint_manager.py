"""
Utilities for checkpoint files and CSV exports
"""

import csv
import json
import logging
import os
import struct
from typing import List, Optional, Sequence

import numpy as np

from models import DataError
from segmentation.net import NetConfig, NetParams

logger = logging.getLogger(__name__)

MAGIC = b"WSEG"
FORMAT_VERSION = 1


class CheckpointManager:
    """
    Reads and writes network checkpoints

    Layout (little-endian): magic 'WSEG', u32 format version, u32 config length,
    config block (UTF-8 JSON of NetConfig), u64 parameter count, theta as f64.
    """

    def __init__(self, checkpoint_path: str):
        """
        Args:
            checkpoint_path: Path of the checkpoint file
        """
        self.checkpoint_path = checkpoint_path

    @staticmethod
    def encode(params: NetParams) -> bytes:
        config = params.config
        block = json.dumps({
            "in_channels": config.in_channels,
            "channels": list(config.channels),
            "kernel_sizes": list(config.kernel_sizes),
            "num_labels": config.num_labels,
            "nonlinearity": config.nonlinearity,
            "seed": config.seed,
        }, sort_keys=True).encode("utf-8")
        header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(block)) + block
        theta = params.theta.astype("<f8")
        return header + struct.pack("<Q", theta.size) + theta.tobytes()

    @staticmethod
    def decode(payload: bytes) -> NetParams:
        if payload[:4] != MAGIC:
            raise DataError("Not a checkpoint file (bad magic)")
        try:
            version, length = struct.unpack_from("<II", payload, 4)
            if version != FORMAT_VERSION:
                raise DataError(f"Unsupported checkpoint version {version}")
            start = 12
            config = NetConfig(**json.loads(payload[start:start + length].decode("utf-8")))
            (count,) = struct.unpack_from("<Q", payload, start + length)
            offset = start + length + 8
            theta = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        except (struct.error, ValueError, TypeError) as e:
            raise DataError(f"Corrupt checkpoint: {e}")
        return NetParams(config, theta.astype(np.float64))

    def save(self, params: NetParams) -> str:
        """Write the checkpoint; returns its path"""
        directory = os.path.dirname(os.path.abspath(self.checkpoint_path))
        os.makedirs(directory, exist_ok=True)
        with open(self.checkpoint_path, "wb") as f:
            f.write(self.encode(params))
        logger.info("checkpoint saved to %s", self.checkpoint_path)
        return self.checkpoint_path

    def load(self) -> NetParams:
        if not os.path.exists(self.checkpoint_path):
            raise DataError(f"Checkpoint not found: {self.checkpoint_path}")
        with open(self.checkpoint_path, "rb") as f:
            return self.decode(f.read())

    def get_checkpoint_info(self) -> Optional[dict]:
        """Size and network shape of the checkpoint, or None if it is missing"""
        if not os.path.exists(self.checkpoint_path):
            return None
        params = self.load()
        return {
            "path": self.checkpoint_path,
            "size": os.stat(self.checkpoint_path).st_size,
            "num_labels": params.config.num_labels,
            "parameters": int(params.theta.size),
        }


class ExportManager:
    """Handles metric exports to CSV"""

    METRICS_HEADERS = ["step", "loss", "miou", "lr"]

    def __init__(self, export_dir: str):
        """
        Args:
            export_dir: Directory to save exported files
        """
        self.export_dir = export_dir
        os.makedirs(export_dir, exist_ok=True)

    def export_to_csv(self, data: Sequence[Sequence], headers: List[str], filename: str) -> str:
        """
        Export rows to <export_dir>/<filename>.csv

        Returns:
            Path of the written file
        """
        filepath = os.path.join(self.export_dir, f"{filename}.csv")
        with open(filepath, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(headers)
            for row in data:
                writer.writerow(row)
        return filepath

    def start_metrics_log(self, filename: str = "metrics") -> str:
        """Create an empty metrics log (header only) to be appended to during training"""
        return self.export_to_csv([], self.METRICS_HEADERS, filename)

    def append_metrics(self, step: int, loss: float, miou: Optional[float], lr: float,
                       filename: str = "metrics"):
        filepath = os.path.join(self.export_dir, f"{filename}.csv")
        with open(filepath, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(
                [step, repr(float(loss)), "" if miou is None else f"{miou:.6f}", repr(float(lr))])

    def export_iou_to_csv(self, per_class: Sequence[Optional[float]], mean: float,
                          filename: str = "iou") -> str:
        """Per-class IOU rows followed by the mean"""
        rows = [[label, "" if value is None else f"{value:.4f}"]
                for label, value in enumerate(per_class)]
        rows.append(["mean", f"{mean:.4f}"])
        return self.export_to_csv(rows, ["class", "iou"], filename)
