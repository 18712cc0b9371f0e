"""Train/evaluate drivers shared by the CLI and the acceptance suite.

Training runs in two phases: the saliency branch alone, then the boundary
and centroid branches jointly (they share the DA weights). Each phase has
its own learning rate because the saliency head tolerates a much larger
step than the offset regressor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import evaluation, fusion, network, synth

SALIENCY_LR = 0.05
JOINT_LR = 0.01
SALIENCY_EPOCHS = 15
JOINT_EPOCHS = 15


@dataclass
class Schedule:
    saliency_epochs: int = SALIENCY_EPOCHS
    saliency_lr: float = SALIENCY_LR
    joint_epochs: int = JOINT_EPOCHS
    joint_lr: float = JOINT_LR
    batch: int = 6
    gamma: float = 0.9


@dataclass
class Variant:
    """Model switches mirroring the ablation flags."""
    use_da: bool = True
    use_be: bool = True
    use_lsu: bool = True

    @property
    def name(self) -> str:
        off = [n for n, on in (("da", self.use_da), ("be", self.use_be), ("lsu", self.use_lsu)) if not on]
        return "full" if not off else "no-" + "-".join(off)


ABLATIONS = {"full": Variant(), "no-lsu": Variant(use_lsu=False), "no-be": Variant(use_be=False),
             "no-da": Variant(use_da=False)}


@dataclass
class Scores:
    ap: dict[float, float]
    count_rate: float
    counts: list[tuple[int, int]] = field(default_factory=list)  # (predicted, true) per image


def train_saliency(model: network.WsidNet, data: network.TrainingData, sched: Schedule, seed: int):
    cfg = network.TrainConfig(epochs=sched.saliency_epochs, lr_init=sched.saliency_lr, batch=sched.batch,
                              gamma=sched.gamma, seed=seed)
    return network.train(model, data, cfg, branches=("saliency",))


def train_joint(model: network.WsidNet, data: network.TrainingData, sched: Schedule, seed: int,
                use_lsu: bool = True):
    cfg = network.TrainConfig(epochs=sched.joint_epochs, lr_init=sched.joint_lr, batch=sched.batch,
                              gamma=sched.gamma, seed=seed)
    w = network.LossWeights(subitizing=1.0 if use_lsu else 0.0)
    return network.train(model, data, cfg, w, branches=("boundary", "centroid"))


def train_model(data: network.TrainingData, variant: Variant = Variant(), sched: Schedule = Schedule(),
                seed: int = 0, saliency_from: network.WsidNet | None = None) -> network.WsidNet:
    """Both phases; ``saliency_from`` reuses an already trained saliency branch.

    The saliency branch never sees DA, BE or L_SU, so ablations of one
    seed can share it.
    """
    model = network.WsidNet(seed, use_da=variant.use_da, use_be=variant.use_be)
    if saliency_from is not None:
        src = saliency_from.branch_params("saliency")
        for k, t in model.branch_params("saliency").items():
            t.data = src[k].data.copy()
    else:
        train_saliency(model, data, sched, seed)
    train_joint(model, data, sched, seed, variant.use_lsu)
    return model


def evaluate_model(model: network.WsidNet, samples: list[synth.SceneSample],
                   thresholds=(0.5, 0.7)) -> Scores:
    dets, gts, counts = {}, {}, []
    for s in samples:
        res = fusion.infer(s.image, model)
        dets[s.seed], gts[s.seed] = res.detections, s.gt_instances
        counts.append((len(res.detections), s.t_star))
    ap = evaluation.evaluate(dets, gts, thresholds).ap_per_threshold
    rate = evaluation.count_accuracy([c[0] for c in counts], [c[1] for c in counts])
    return Scores(ap, rate, counts)


def evaluate_gt_maps(samples: list[synth.SceneSample], thresholds=(0.5, 0.7)) -> Scores:
    """Fusion ceiling: the pipeline fed with ground-truth S, B and V."""
    dets, gts, counts = {}, {}, []
    for s in samples:
        res = fusion.infer_from_maps(*synth.gt_maps(s))
        dets[s.seed], gts[s.seed] = res.detections, s.gt_instances
        counts.append((len(res.detections), s.t_star))
    ap = evaluation.evaluate(dets, gts, thresholds).ap_per_threshold
    rate = evaluation.count_accuracy([c[0] for c in counts], [c[1] for c in counts])
    return Scores(ap, rate, counts)
