"""Command-line front end: synth, train, infer, eval, canny, crf, gradcheck.

Every subcommand exits 0 on success. Failures print a single line
``error<TAB>kind<TAB>message`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import boundary, crf, evaluation, experiment, fusion, gradcheck, io, network, synth

SCENE_FMT = "scene_{:05d}"
EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 2, 3, 4


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}", EXIT_USAGE)


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one number")
    return vals


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing", f"{p} does not exist")
    return p


# -- synth --------------------------------------------------------------------------
def cmd_synth(a) -> None:
    if a.n < 1:
        raise CliError("flag", "--n must be >= 1", EXIT_USAGE)
    spec = synth.SceneSpec.from_text(_existing(a.spec).read_text()) if a.spec else synth.SceneSpec()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.txt").write_text(spec.to_text())
    manifest = {"n": a.n, "seed": a.seed}
    for i in range(a.n):
        seed = a.seed + i
        name = SCENE_FMT.format(i)
        s = synth.gen_scene(seed, spec)
        s.pseudo = synth.pseudo_supervision(s)
        d = out / name
        d.mkdir(exist_ok=True)
        io.save_rgb(d / "image.png", s.image)
        io.save_labels(d / "gt.png", s.label_map())
        io.write_tensor(d / "cam.wsid", s.pseudo.cam)
        io.write_tensor(d / "pseudo_saliency.wsid", s.pseudo.saliency)
        io.write_tensor(d / "pseudo_boundary.wsid", s.pseudo.boundary)
        io.write_tensor(d / "pseudo_offsets.wsid", s.pseudo.offsets)
        S, B, V = synth.gt_maps(s)
        io.write_tensor(d / "gt_saliency.wsid", S)
        io.write_tensor(d / "gt_boundary.wsid", B)
        io.write_tensor(d / "gt_offsets.wsid", V)
        manifest[f"{name}.seed"] = seed
        manifest[f"{name}.t_star"] = s.t_star
        manifest[f"{name}.classes"] = ",".join(s.class_ids)
    io.write_manifest(out / "manifest.txt", manifest)
    print(f"wrote {a.n} scenes to {out}")


def _scene_names(data: Path) -> list[str]:
    m = io.read_manifest(_existing(data / "manifest.txt"))
    try:
        n = int(m["n"])
    except (KeyError, ValueError):
        raise CliError("format", f"{data / 'manifest.txt'}: missing or bad 'n' entry") from None
    return [SCENE_FMT.format(i) for i in range(n)]


def load_training_data(data: Path) -> network.TrainingData:
    names = _scene_names(data)
    m = io.read_manifest(data / "manifest.txt")
    imgs, sal, bnd, off, t = [], [], [], [], []
    for name in names:
        d = data / name
        imgs.append(io.load_rgb(_existing(d / "image.png")))
        sal.append(io.read_tensor(d / "pseudo_saliency.wsid")[None])
        bnd.append(io.read_tensor(d / "pseudo_boundary.wsid")[None])
        off.append(io.read_tensor(d / "pseudo_offsets.wsid"))
        t.append(float(m[f"{name}.t_star"]))
    images = np.stack(imgs)
    return network.TrainingData(images, np.stack(sal), np.stack(bnd), np.stack(off), np.array(t),
                                boundary.canny_planes(images))


# -- train --------------------------------------------------------------------------
def _model_config(model: network.WsidNet, seed: int) -> dict:
    return {"seed": seed, "use_da": int(model.use_da), "use_be": int(model.use_be)}


def load_model(ckpt) -> network.WsidNet:
    params, cfg = io.load_checkpoint(_existing(ckpt))
    try:
        model = network.WsidNet(int(cfg["seed"]), use_da=cfg["use_da"] == "1", use_be=cfg["use_be"] == "1")
    except KeyError as e:
        raise CliError("format", f"{ckpt}/config.txt: missing key {e.args[0]}") from None
    model.load_params(params)
    return model


def cmd_train(a) -> None:
    data = load_training_data(Path(a.data))
    if a.init:
        model = load_model(a.init)
        if (model.use_da, model.use_be) != (not a.no_da, not a.no_be):
            raise CliError("flag", "--no-da/--no-be must match the --init checkpoint", EXIT_USAGE)
    else:
        model = network.WsidNet(a.seed, use_da=not a.no_da, use_be=not a.no_be)
    log = []
    t0 = time.perf_counter()
    phases = ("saliency", "joint") if a.branch == "all" else (a.branch,)
    for phase in phases:
        sal = phase == "saliency"
        lr = a.lr if a.lr is not None else (experiment.SALIENCY_LR if sal else experiment.JOINT_LR)
        cfg = network.TrainConfig(lr_init=lr, batch=a.batch, epochs=a.epochs, gamma=a.gamma, seed=a.seed)
        w = network.LossWeights(subitizing=0.0 if a.no_lsu else 1.0)
        branches = ("boundary", "centroid") if phase == "joint" else (phase,)
        network.train(model, data, cfg, w, branches=branches, log_fn=log.append)
    out = Path(a.out)
    cfg = _model_config(model, a.seed)
    cfg.update(branch=a.branch, epochs=a.epochs, batch=a.batch, gamma=a.gamma, no_lsu=int(a.no_lsu))
    io.save_checkpoint(out, {k: t.data for k, t in model.params().items()}, cfg)
    (out / "loss_log.txt").write_text("\n".join(log) + "\n")
    print(f"trained {a.branch} on {len(data)} scenes in {time.perf_counter() - t0:.1f}s -> {out}")


# -- infer --------------------------------------------------------------------------
def _write_prediction(out: Path, res: fusion.InferenceResult, image: np.ndarray) -> None:
    out.mkdir(parents=True, exist_ok=True)
    io.save_labels(out / "labels.png", res.labels)
    scores = {"count": len(res.detections)}
    scores.update({f"detection.{k}": repr(float(d.score)) for k, d in enumerate(res.detections, start=1)})
    io.write_manifest(out / "scores.txt", scores)
    io.save_rgb(out / "overlay.png", io.overlay(image, res.labels))


def read_prediction(d: Path) -> list[evaluation.Detection]:
    labels = io.load_labels(_existing(d / "labels.png"))
    m = io.read_manifest(_existing(d / "scores.txt"))
    dets = []
    for k in range(1, int(m.get("count", 0)) + 1):
        mask = labels == k
        if not mask.any():
            raise CliError("format", f"{d}: detection {k} listed in scores.txt but absent from labels.png")
        dets.append(evaluation.Detection(mask, float(m[f"detection.{k}"])))
    return dets


def cmd_infer(a) -> None:
    out = Path(a.out)
    if a.maps:
        S, B, V = (io.read_tensor(_existing(p)) for p in a.maps)
        res = fusion.infer_from_maps(S, B, V)
        image = io.load_rgb(a.image) if a.image else np.repeat(np.clip(S, 0, 1)[None], 3, axis=0)
        _write_prediction(out, res, image)
        print(f"{len(res.detections)} detections -> {out}")
        return
    if not a.ckpt:
        raise CliError("flag", "infer needs --ckpt with --image/--data, or --maps S B V", EXIT_USAGE)
    model = load_model(a.ckpt)
    if a.data:
        data = Path(a.data)
        names = _scene_names(data)
        for name in names:
            img = io.load_rgb(_existing(data / name / "image.png"))
            _write_prediction(out / name, fusion.infer(img, model), img)
        print(f"predicted {len(names)} scenes -> {out}")
        return
    if not a.image:
        raise CliError("flag", "infer needs --image, --data or --maps", EXIT_USAGE)
    img = io.load_rgb(_existing(a.image))
    res = fusion.infer(img, model)
    _write_prediction(out, res, img)
    print(f"{len(res.detections)} detections -> {out}")


# -- eval ---------------------------------------------------------------------------
def cmd_eval(a) -> None:
    pred, gt = _existing(a.pred), _existing(a.gt)
    names = _scene_names(gt)
    dets, gts = {}, {}
    for name in names:
        gts[name] = evaluation.labels_to_masks(io.load_labels(_existing(gt / name / "gt.png")))
        dets[name] = read_prediction(pred / name)
    res = evaluation.evaluate(dets, gts, a.iou)
    lines = [f"{t}\t{ap!r}" for t, ap in res.ap_per_threshold.items()]
    text = "\n".join(lines) + "\n"
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)


# -- canny / crf --------------------------------------------------------------------
def cmd_canny(a) -> None:
    img = io.load_rgb(_existing(a.image))
    edges = boundary.canny_rgb(img, sigma=a.sigma, low=a.low, high=a.high)
    io.save_gray(a.out, edges)
    print(f"{int(edges.sum())} edge pixels -> {a.out}")


def cmd_crf(a) -> None:
    img = io.load_rgb(_existing(a.image)) * 255.0
    unary = io.read_tensor(_existing(a.unary))
    params = crf.CrfParams(w1=a.w1, w2=a.w2, sigma_alpha=a.sa, sigma_beta=a.sb, sigma_gamma=a.sg,
                           iterations=a.iters)
    q = crf.mean_field(img, unary, params, mode=a.mode, return_all=True)
    io.write_tensor(a.out, q)
    print(f"marginals {list(q.shape)} -> {a.out}")


# -- gradcheck ----------------------------------------------------------------------
def cmd_gradcheck(a) -> int:
    if a.configs < 1:
        raise CliError("flag", "--configs must be >= 1", EXIT_USAGE)
    t0 = time.perf_counter()
    results = gradcheck.run(a.module, a.seed, a.configs)
    for line in gradcheck.summarize(results):
        print(line)
    ok = all(r.passed for r in results)
    print(f"summary module={a.module} cases={len(results)} status={'PASS' if ok else 'FAIL'} "
          f"seconds={time.perf_counter() - t0:.1f}")
    return 0 if ok else 1


# -- parser -------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wsid", description="Weakly supervised salient instance detection on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spec", help="key=value scene spec file")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train branches on a synth dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--branch", choices=("saliency", "boundary", "centroid", "joint", "all"), default="all")
    s.add_argument("--epochs", type=int, default=experiment.JOINT_EPOCHS)
    s.add_argument("--lr", type=float, default=None,
                   help=f"initial lr (default {experiment.SALIENCY_LR} saliency, {experiment.JOINT_LR} others)")
    s.add_argument("--gamma", type=float, default=0.9)
    s.add_argument("--batch", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--init", help="continue from this checkpoint")
    s.add_argument("--no-da", action="store_true")
    s.add_argument("--no-be", action="store_true")
    s.add_argument("--no-lsu", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="segment instances")
    s.add_argument("--ckpt")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--data", help="predict every scene of a synth dataset")
    src.add_argument("--maps", nargs=3, metavar=("S", "B", "V"), help="saliency, boundary, offset tensors")
    s.add_argument("--image", help="input PNG (background for the overlay with --maps)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", help="mAP of predictions against a synth dataset")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--iou", type=_floats, default=[0.5, 0.7])
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("canny", help="Canny edge map of an image")
    s.add_argument("--image", required=True)
    s.add_argument("--sigma", type=float, default=boundary.CANNY_SIGMA)
    s.add_argument("--low", type=float, default=boundary.CANNY_LOW)
    s.add_argument("--high", type=float, default=boundary.CANNY_HIGH)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_canny)

    d = crf.CrfParams()
    s = sub.add_parser("crf", help="dense CRF mean-field refinement of a [2,H,W] unary")
    s.add_argument("--image", required=True)
    s.add_argument("--unary", required=True)
    s.add_argument("--w1", type=float, default=d.w1)
    s.add_argument("--w2", type=float, default=d.w2)
    s.add_argument("--sa", type=float, default=d.sigma_alpha)
    s.add_argument("--sb", type=float, default=d.sigma_beta)
    s.add_argument("--sg", type=float, default=d.sigma_gamma)
    s.add_argument("--iters", type=int, default=d.iterations)
    s.add_argument("--mode", choices=("auto", "exact", "truncated"), default="auto")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_crf)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--module", choices=gradcheck.MODULES + ("all",), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--configs", type=int, default=20)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        rc = args.fn(args)
        return int(rc or 0)
    except CliError as e:
        msg, code, kind = str(e), e.code, e.kind
    except io.TensorFormatError as e:
        msg, code, kind = str(e), EXIT_INPUT, "format"
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        msg, code, kind = str(e), EXIT_INPUT, "io"
    except (ValueError, KeyError, network.ShapeError) as e:
        msg, code, kind = str(e), EXIT_INPUT, "input"
    except network.TrainingDiverged as e:
        msg, code, kind = str(e), EXIT_RUNTIME, "diverged"
    sys.stderr.write(f"error\t{kind}\t{' '.join(msg.split())}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
