"""Small run configurations shared by the training and CLI tests."""
from mcncl.config import from_dict, RunConfig


def tiny_config(out_dir="runs/tiny", **overrides) -> RunConfig:
    raw = {
        "seed": 0,
        "out_dir": str(out_dir),
        "data": {
            "corpus": {
                "dialogues": [6, 2, 2],
                "utterances_per_dialogue": [3, 5],
                "num_classes": 3,
                "separation": 4.0,
                "text_dim": 12,
                "audio_dim": 10,
                "visual_dim": 8,
                "frames": [2, 4],
                "seed": 1,
            }
        },
        "model": {
            "dim": 8,
            "psa": {"se_reduction": 2},
            "mcn": {"num_heads": 2, "num_layers": 1},
            "contrastive": {"temperature": 0.5},
            "classifier": {"hidden": 16, "hidden2": 8},
        },
        "optim": {"lr": 1e-3, "batch_size": 8, "epochs": 3},
    }
    for key, value in overrides.items():
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(RunConfig, raw)
