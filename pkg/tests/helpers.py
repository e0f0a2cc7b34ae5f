"""Small configurations shared by the scheduler and command-line tests."""
from bonsai.config import RunConfig


def tiny_cfg(**changes):
    base = RunConfig(cells=2, nodes_per_cell=1, channels0=4, batch_size=8, epoch_budget=3,
                     sections=2, per_class=8, image_size=8, cutout_size=2, drop_path_p=0.2)
    return base.updated(**changes)
