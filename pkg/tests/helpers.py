from hysp_lab.config import load_config


def tiny_config(seed=0, **train):
    """Small enough that a full pretrain takes well under a second."""
    return load_config(overrides={
        "seed": seed,
        "data": {"n_per_class": 8, "frames": 8},
        "model": {"embed_dim": 16, "hidden": 8},
        "train": {"epochs": 2, "batch_size": 8, "e1": 0, "e2": 1, **train},
        "probe": {"epochs": 10},
        "analytics": {"n_views": 2},
    })
