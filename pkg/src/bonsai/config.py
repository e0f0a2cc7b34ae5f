"""Run configuration: presets, JSON round-trip, command-line overrides."""
import dataclasses
import json
from dataclasses import dataclass, field


@dataclass
class RunConfig:
    cells: int = 4
    nodes_per_cell: int = 2
    channels0: int = 16
    batch_size: int = 64
    epoch_budget: int = 60
    sections: int = 2
    # absolute budget in bytes; when null, budget_fraction of the fully
    # hyper-connected model's accounted bytes is used
    budget_bytes: int | None = None
    budget_fraction: float = 0.85
    lambda0: float = 0.01
    lambda_autoscale: bool = True
    M: float = 1e5
    gate_init: float = 0.1
    drop_path_p: float = 0.3
    aux_weight: float = 0.4
    lr_max: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 3e-4
    seed: int = 0
    dataset: str = "synthetic"
    classes: int = 3
    per_class: int = 500
    image_size: int = 8
    image_channels: int = 3
    synth_noise: float = 0.25
    val_fraction: float = 0.1
    random_crop_pad: int = 1
    horizontal_flip: bool = True
    cutout_size: int = 4
    data_dir: str | None = None
    output_dir: str = "runs/search"
    kind: str = "bonsai"
    level: int | None = None
    per_section_reference: bool = False

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    def updated(self, **changes):
        return dataclasses.replace(self, **changes)


PRESETS = {
    # 4 cells / 2 nodes / 16 channels / 60 epochs / 2 sections on 8x8 synthetic data
    "desk": RunConfig(),
    "full": RunConfig(cells=8, nodes_per_cell=4, channels0=36, batch_size=64, epoch_budget=600,
                      sections=4, dataset="cifar10", classes=10, image_size=32,
                      random_crop_pad=4, cutout_size=16),
}


def load_config(path=None, preset="desk", overrides=None):
    cfg = PRESETS[preset]
    if path is not None:
        with open(path) as fh:
            doc = json.load(fh)
        cfg = RunConfig.from_dict({**cfg.to_dict(), **doc})
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def parse_override(text):
    """``key=value`` with the value read as JSON when possible."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
