"""Command-line interface: synth, train, render, invert, ablate, eval.

Every command writes one ``RunManifest`` JSON next to its outputs. The
perceptual extractor looks for VGG16 weights under ``$AVATAR_CACHE``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, tensorstore
from .data import AvatarDataset, SynthSpec, ingest, synth_generate, write_dataset
from .errors import AvatarError
from .metrics import evaluate, format_table, write_report
from .splatting import orbit_camera, save_png

log = logging.getLogger("avatarsplat")

MANIFEST_NAME = "run_manifest.json"


# -- manifests -------------------------------------------------------------------------------


def _blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(paths: Sequence[str | Path], config: dict | None = None) -> str:
    """Git-style digest: blob hashes of every input file, folded into a tree hash with the config."""
    entries = []
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p] if p.exists() else []
        for f in files:
            rel = f.relative_to(p).as_posix() if p.is_dir() else f.name
            entries.append(f"{_blob_hash(f.read_bytes())} {p.name}/{rel}")
    body = "\n".join(entries) + "\n" + json.dumps(config or {}, sort_keys=True, default=str)
    return hashlib.sha1(b"tree %d\0" % len(body.encode()) + body.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    input_hash: str
    outputs: list[str] = field(default_factory=list)
    wall_clock: float = 0.0
    version: str = __version__

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=1, default=str))
        return path


def _manifest_path(out: Path, is_dir: bool) -> Path:
    return out / MANIFEST_NAME if is_dir else out.with_name(out.stem + ".manifest.json")


# -- shared helpers --------------------------------------------------------------------------


def load_dataset(spec: str) -> AvatarDataset:
    """A dataset directory, or ``synth`` / ``synth:frames=20,resolution=64,seed=0``."""
    if spec == "synth" or spec.startswith("synth:"):
        overrides = {}
        if ":" in spec:
            for item in filter(None, spec.split(":", 1)[1].split(",")):
                k, v = item.split("=")
                overrides[k.strip().replace("-", "_")] = int(v)
        return synth_generate(SynthSpec(**overrides))
    return ingest(spec)


def _dataset_inputs(spec: str) -> list[Path]:
    return [] if spec.startswith("synth") else [Path(spec)]


def parse_range(text: str) -> list[float]:
    """``start:stop:step`` inclusive of ``stop`` (``-30:30:5`` gives 13 values)."""
    parts = [float(v) for v in text.split(":")]
    if len(parts) != 3 or parts[2] == 0:
        raise argparse.ArgumentTypeError(f"expected start:stop:step, got {text!r}")
    start, stop, step = parts
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [start + i * step for i in range(max(count, 0))]


def read_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _known(cls, d: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return d


def resolve_training(config: dict, paper: bool, seed: int):
    """Preset plus TOML overrides: ``[model]``, ``[train]`` (all stages), ``[stage1]``..``[stage3]``."""
    from .trainer import ModelConfig, TrainConfig, desk_preset, paper_preset

    preset = paper_preset(seed) if paper else desk_preset(seed)
    common = _known(TrainConfig, dict(config.get("train", {})))
    for n in (1, 2, 3):
        over = {**common, **_known(TrainConfig, dict(config.get(f"stage{n}", {})))}
        preset[n] = replace(preset[n], **over)
    model_cfg = ModelConfig(**{"seed": seed, **_known(ModelConfig, dict(config.get("model", {})))})
    return preset, model_cfg


def _save_images(images, out_dir: Path, names) -> list[str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for img, name in zip(images, names):
        p = out_dir / name
        save_png(np.clip(img, 0, 1), p)
        written.append(str(p))
    return written


def _load_png_dir(path: Path) -> tuple[list[str], list[np.ndarray]]:
    from PIL import Image

    files = sorted(path.glob("*.png"))
    return [f.name for f in files], [np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 255.0 for f in files]


class UsageError(Exception):
    pass


# -- commands --------------------------------------------------------------------------------


def cmd_synth(args) -> RunManifest:
    spec = SynthSpec(frames=args.frames, resolution=args.resolution, expression_dim=args.expression_dim,
                     seed=args.seed)
    ds = synth_generate(spec)
    out = write_dataset(ds, args.out)
    return RunManifest("synth", asdict(spec), content_hash([], asdict(spec)),
                       [str(out / "tracking.json"), str(out / "frames"), str(out / "mesh.obj")])


def cmd_train(args) -> RunManifest:
    from .trainer import Checkpoint, iteration_plan, train_all

    config = read_config(args.config)
    preset, model_cfg = resolve_training(config, args.paper, args.seed)
    print(iteration_plan(preset))
    snapshot = {"stage": args.stage, "preset": "paper" if args.paper else "desk", "model": asdict(model_cfg),
                **{f"stage{n}": preset[n].to_dict() for n in (1, 2, 3)}}
    if args.dry_run:
        return RunManifest("train", snapshot, content_hash([], snapshot))
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    out = Path(args.out)
    ckpt = None
    if stages[0] > 1:
        prev = Path(args.ckpt) if args.ckpt else out / f"stage{stages[0] - 1}"
        if not (prev / "manifest.json").exists():
            raise UsageError(f"--stage {stages[0]} needs a completed stage-{stages[0] - 1} checkpoint "
                             f"(pass --ckpt or train into {out})")
        ckpt = Checkpoint.load(prev)
        if ckpt.stage != stages[0] - 1 or not ckpt.complete:
            raise UsageError(f"{prev} is not a completed stage-{stages[0] - 1} checkpoint")
    dataset = load_dataset(args.dataset)
    t0 = time.time()
    train_all(dataset, preset, out, model_cfg, stages, ckpt)
    log.info("training finished in %.1fs", time.time() - t0)
    outputs = [str(out / f"stage{n}") for n in stages] + [str(out / f"stage{n}_trace.jsonl") for n in stages]
    (out / "dataset.txt").write_text(args.dataset + "\n")
    inputs = _dataset_inputs(args.dataset) + ([Path(args.config)] if args.config else [])
    return RunManifest("train", snapshot, content_hash(inputs, snapshot), outputs)


def _load_ckpt_model(path: str, dataset: AvatarDataset):
    from .trainer import Checkpoint, TrainConfig

    ckpt = Checkpoint.load(path)
    model = ckpt.restore_model(dataset)
    model.eval()
    cfg = TrainConfig.from_dict(ckpt.meta["train_config"])
    return ckpt, model, cfg


def _dataset_for_ckpt(args) -> str:
    if args.dataset:
        return args.dataset
    hint = Path(args.ckpt).parent / "dataset.txt"
    if hint.exists():
        return hint.read_text().strip()
    raise UsageError("--dataset is required (no dataset.txt next to the checkpoint)")


def cmd_render(args) -> RunManifest:
    ds_spec = _dataset_for_ckpt(args)
    dataset = load_dataset(ds_spec)
    ckpt, model, cfg = _load_ckpt_model(args.ckpt, dataset)
    stage = ckpt.stage
    injection = cfg.injection
    out = Path(args.out)
    outputs: list[str] = []
    with torch.no_grad():
        if args.mode == "self":
            train, test = dataset.split()
            ids = {"train": train, "test": test, "all": list(range(len(dataset)))}[args.split]
            names = [f"{i:06d}.png" for i in ids]
            preds = [model.predict(dataset[i].conditioning, stage, injection, exp_scale=args.exp_scale).numpy()
                     for i in ids]
            outputs += _save_images(preds, out / "pred", names)
            outputs += _save_images([dataset[i].image for i in ids], out / "gt", names)
        elif args.mode == "cross":
            if not args.driving:
                raise UsageError("--mode cross needs --driving")
            driving = load_dataset(args.driving)
            preds, names = [], []
            for k, frame in enumerate(driving.frames):
                # unseen frame id: the temporal latent falls back to the mean
                cond = replace(frame.conditioning, frame_id=-1)
                preds.append(model.predict(cond, stage, injection, exp_scale=args.exp_scale).numpy())
                names.append(f"{k:06d}.png")
            outputs += _save_images(preds, out / "pred", names)
        else:
            base = dataset[args.frame].conditioning
            preds, names = [], []
            for k, yaw in enumerate(parse_range(args.yaw)):
                cam = orbit_camera(base.camera, yaw)
                preds.append(model.predict(base, stage, injection, camera=cam, exp_scale=args.exp_scale).numpy())
                names.append(f"{k:03d}_yaw{yaw:+06.1f}.png")
            outputs += _save_images(preds, out / "orbit", names)
    config = {"ckpt": args.ckpt, "mode": args.mode, "dataset": ds_spec, "driving": args.driving, "yaw": args.yaw,
              "frame": args.frame, "split": args.split, "exp_scale": args.exp_scale, "stage": stage}
    inputs = [Path(args.ckpt)] + _dataset_inputs(ds_spec)
    return RunManifest("render", config, content_hash(inputs, config), outputs)


def cmd_invert(args) -> RunManifest:
    from PIL import Image

    from .generator import StyleGenerator, load_pretrained, pti_invert, save_weights
    from .trainer import Checkpoint, ModelConfig, write_trace

    images = [p for p in (args.images or "").split(",") if p]
    if not images:
        raise UsageError("--images needs at least one image path")
    targets = [torch.as_tensor(np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0) for p in images]
    if args.ckpt:
        ck = Checkpoint.load(args.ckpt)
        mc = ModelConfig(**ck.meta["model_config"])
        generator = StyleGenerator(mc.generator_widths, mc.w_dim, mc.z_dim)
        tensorstore.load_into_module(generator, ck.tensors, prefix="model/generator.")
    elif args.weights:
        generator = load_pretrained(args.weights)
    else:
        torch.manual_seed(args.seed)
        generator = StyleGenerator()
    from .losses import get_extractor, loss_perceptual

    extractor = get_extractor()
    result = pti_invert(generator, targets, args.steps1, args.steps2,
                        perceptual=lambda a, b: loss_perceptual(a, b, extractor),
                        perceptual_weight=args.perceptual_weight)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(generator, out / "generator")
    np.save(out / "w.npy", result.w.detach().numpy())
    write_trace(out / "pti_trace.jsonl", [{"phase": 1 if i < len(result.phase1_trace) else 2, "iter": i, "loss": v}
                                          for i, v in enumerate(result.trace)])
    with torch.no_grad():
        recon = generator(result.w)[0].permute(1, 2, 0).numpy()
    save_png(np.clip(recon, 0, 1), out / "reconstruction.png")
    config = {"images": images, "steps1": args.steps1, "steps2": args.steps2, "ckpt": args.ckpt,
              "weights": args.weights, "perceptual_weight": args.perceptual_weight}
    inputs = [Path(p) for p in images] + ([Path(args.ckpt)] if args.ckpt else [])
    outputs = [str(out / n) for n in ("generator", "w.npy", "pti_trace.jsonl", "reconstruction.png")]
    return RunManifest("invert", config, content_hash(inputs, config), outputs)


def cmd_ablate(args) -> RunManifest:
    from .ablation import format_records, load_base, run_study
    from .trainer import TrainConfig, desk_preset

    ds_spec = args.dataset or _dataset_hint(Path(args.ckpt))
    dataset = load_dataset(ds_spec)
    base = load_base(args.ckpt)
    stage3 = replace(desk_preset(args.seed)[3], **_known(TrainConfig, read_config(args.config).get("stage3", {})))
    records = run_study(args.study, base, dataset, epochs=args.epochs, stage3=stage3, split=args.split,
                        stage12_iterations=args.stage12_iterations, out=args.out)
    md = Path(args.out).with_suffix(".md")
    md.write_text(format_records(records))
    print(format_records(records))
    config = {"study": args.study, "ckpt": args.ckpt, "dataset": ds_spec, "epochs": args.epochs,
              "split": args.split, "stage3": stage3.to_dict(), "stage12_iterations": args.stage12_iterations}
    inputs = [Path(args.ckpt)] + _dataset_inputs(ds_spec)
    return RunManifest("ablate", config, content_hash(inputs, config), [args.out, str(md)])


def _dataset_hint(ckpt: Path) -> str:
    for d in (ckpt, ckpt.parent):
        if (d / "dataset.txt").exists():
            return (d / "dataset.txt").read_text().strip()
    raise UsageError("--dataset is required (no dataset.txt found next to the checkpoint)")


def cmd_eval(args) -> RunManifest:
    from .losses import get_extractor

    pred_names, preds = _load_png_dir(Path(args.pred))
    gt_names, gts = _load_png_dir(Path(args.gt))
    if len(preds) != len(gts):
        raise UsageError(f"frame counts differ: {len(preds)} predictions vs {len(gts)} references")
    if not preds:
        raise UsageError(f"no PNG frames in {args.pred}")
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = evaluate(preds, gts, metrics, extractor=get_extractor(), method=args.method, dataset=args.label)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    md = out.with_suffix(".md")
    write_report([report], out, md)
    print(format_table([report]))
    config = {"pred": args.pred, "gt": args.gt, "metrics": metrics, "method": args.method, "label": args.label}
    return RunManifest("eval", config, content_hash([Path(args.pred), Path(args.gt)], config), [str(out), str(md)])


# -- parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avatarsplat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a procedural head clip")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--expression-dim", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="run training stages")
    t.add_argument("--dataset", default="synth")
    t.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--ckpt", help="checkpoint of the previous stage (default: OUT/stage{n-1})")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--dry-run", action="store_true", help="print the iteration plan and exit")
    scale = t.add_mutually_exclusive_group()
    scale.add_argument("--desk", action="store_true", help="single-core iteration counts (default)")
    scale.add_argument("--paper", action="store_true", help="full-scale iteration counts")

    r = sub.add_parser("render", help="render frames from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--mode", choices=["self", "cross", "orbit"], default="self")
    r.add_argument("--dataset")
    r.add_argument("--driving")
    r.add_argument("--yaw", default="-30:30:5")
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--split", choices=["train", "test", "all"], default="test")
    r.add_argument("--exp-scale", type=float, default=1.0)
    r.add_argument("--out", required=True)

    i = sub.add_parser("invert", help="multi-view pivotal tuning of the style generator")
    i.add_argument("--images", required=True, help="comma-separated image paths")
    i.add_argument("--ckpt")
    i.add_argument("--weights")
    i.add_argument("--steps1", type=int, default=500)
    i.add_argument("--steps2", type=int, default=300)
    i.add_argument("--perceptual-weight", type=float, default=0.1)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="run an ablation study")
    a.add_argument("--ckpt", required=True, help="run directory or stage-2/3 checkpoint")
    a.add_argument("--study", choices=["regions", "blocks", "prune", "features", "gan"], required=True)
    a.add_argument("--dataset")
    a.add_argument("--config")
    a.add_argument("--epochs", type=int, default=10)
    a.add_argument("--stage12-iterations", type=int, default=300)
    a.add_argument("--split", choices=["train", "test"], default="test")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score predicted frames against references")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--metrics", default="psnr,ssim,lpips,flmd,sd")
    e.add_argument("--method", default="Ours")
    e.add_argument("--label", default="synthetic")
    e.add_argument("--out", required=True)
    return p


COMMANDS = {"synth": (cmd_synth, True), "train": (cmd_train, True), "render": (cmd_render, True),
            "invert": (cmd_invert, True), "ablate": (cmd_ablate, False), "eval": (cmd_eval, False)}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    fn, out_is_dir = COMMANDS[args.command]
    t0 = time.time()
    try:
        manifest = fn(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (AvatarError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    manifest.wall_clock = time.time() - t0
    missing = [o for o in manifest.outputs if not Path(o).exists()]
    if missing:
        print(f"error: outputs missing after {args.command}: {missing}", file=sys.stderr)
        return 1
    manifest.write(_manifest_path(Path(args.out), out_is_dir))
    return 0


if __name__ == "__main__":
    sys.exit(main())
