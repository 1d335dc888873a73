"""Regenerate the byte-level golden files under tests/golden (run only when a format changes)."""
from pathlib import Path

import numpy as np
import torch

from xview.io import PredictionRecord, encode_checkpoint, encode_features, write_predictions

OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    z = np.array([[0.0, 1.0], [-2.5, 0.125], [3.0, -1.0]], dtype=np.float32)
    (OUT / "features.svxf").write_bytes(encode_features(z))
    write_predictions(OUT / "predictions.txt", [
        PredictionRecord("train00000", 0.125, 0.5, 0.75, 0.1, "correct"),
        PredictionRecord("train00000", 0.5, 0.8125, 0.3333333333333333, 0.6, "error"),
        PredictionRecord("eval00001", 0.0, 1.0, 1e-07, 0.5, "error"),
    ])
    tensors = {
        "w": torch.tensor([[1.0, -2.0], [0.5, 3.25]], dtype=torch.float64),
        "b": torch.tensor([0.25, -0.5], dtype=torch.float32),
        "step": torch.tensor([7], dtype=torch.int64),
        "rng": torch.tensor([1, 2, 255], dtype=torch.uint8),
    }
    (OUT / "checkpoint.svxc").write_bytes(encode_checkpoint(tensors, "0" * 64, "train.seed = 0\n"))


if __name__ == "__main__":
    main()
