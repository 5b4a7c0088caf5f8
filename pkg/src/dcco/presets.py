"""Named experiment presets sized for the synthetic dataset.

Full-scale setups of 100 classes and 50K samples map to 10 classes and 2K
samples. The ``table1-*`` presets divide clients per round by 8, which
keeps every round at 64 samples whatever the samples per client. The
``table2-*`` presets model one-class clients of three samples each and map
64/128/256 clients per round to 8/16/32.
"""

from __future__ import annotations

import copy

TOY_ENCODER = {
    "input_dim": 64,
    "hidden_dims": [64],
    "projection_dims": [64, 16],
    "groups": 8,
}

_BASE = {
    "dataset": {"format": "synthetic", "classes": 10, "dim": 64, "n": 2000, "test_size": 1000},
    "encoder": TOY_ENCODER,
    "server_optimizer": {"kind": "adam", "lr": 3e-3, "schedule": "cosine"},
    "rounds": 2000,
    "local_lr": 1.0,
    "lam": 20.0,
    "temperature": 0.1,
    "probes": [
        {"protocol": "linear", "labeled_fraction": 0.1, "steps": 300, "lr": 5e-3},
        {"protocol": "finetune", "labeled_fraction": 0.1, "steps": 100, "lr": 5e-3},
    ],
}


def _table1(samples_per_client: int, clients_per_round: int, alpha: float) -> dict:
    cfg = copy.deepcopy(_BASE)
    cfg["partition"] = {"num_clients": 2000 // samples_per_client,
                        "samples_per_client": samples_per_client, "alpha": alpha}
    cfg["clients_per_round"] = clients_per_round
    return cfg


def _table2(clients_per_round: int, server_lr: float) -> dict:
    cfg = copy.deepcopy(_BASE)
    cfg["partition"] = {"num_clients": 2000 // 3, "samples_per_client": 3, "alpha": 0.0}
    cfg["clients_per_round"] = clients_per_round
    cfg["server_optimizer"] = {"kind": "lars", "lr": server_lr, "schedule": "cosine",
                               "momentum": 0.9}
    cfg["probes"] = [{"protocol": "finetune", "labeled_fraction": 0.1, "steps": 100, "lr": 5e-3}]
    return cfg


def _toy_trend() -> dict:
    # The finetune comparison against training from scratch uses the scarce
    # label regime (1%, two labels per class), where pretraining matters most.
    cfg = _table1(2, 16, 0.0)
    cfg["probes"] = [
        {"protocol": "linear", "labeled_fraction": 0.1, "steps": 300, "lr": 5e-3},
        {"protocol": "finetune", "labeled_fraction": 0.01, "steps": 300, "lr": 5e-3},
    ]
    return cfg


PRESETS: dict[str, dict] = {
    # table1-*: samples per client and clients per round, non-IID (alpha 0) or IID.
    "table1-noniid-1spc": _table1(1, 64, 0.0),
    "table1-noniid-4spc": _table1(4, 16, 0.0),
    "table1-noniid-8spc": _table1(8, 8, 0.0),
    "table1-noniid-16spc": _table1(16, 4, 0.0),
    "table1-iid-4spc": _table1(4, 16, 1000.0),
    "table1-iid-8spc": _table1(8, 8, 1000.0),
    "table1-iid-16spc": _table1(16, 4, 1000.0),
    # table2-*: clients-per-round sweep with LARS server learning rates.
    "table2-64cpr": _table2(8, 0.15),
    "table2-128cpr": _table2(16, 0.9),
    "table2-256cpr": _table2(32, 1.8),
    # Two samples per client, non-IID: the qualitative-trend experiment.
    "toy-noniid-2spc": _toy_trend(),
}


def get_preset(name: str) -> dict:
    from .errors import InvalidConfig

    if name not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", "preset")
    return copy.deepcopy(PRESETS[name])
