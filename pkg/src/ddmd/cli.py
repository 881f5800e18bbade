"""Command-line entry point: ``ddmd <stage> [options]``.

Stages write into one output directory::

    <out>/config.yaml                  resolved config of the last invocation
    <out>/data/manifest.json, blobs/   synthetic corpus
    <out>/ae1/, ae2/                   mixture and normal-only ensembles
    <out>/features/                    X/Y maps, scores.json, histogram.{json,csv}
    <out>/diffusion/<variant>/         denoiser checkpoint and loss.csv
    <out>/samples/<variant>/           soft and binary masks with sidecars
    <out>/eval/<variant>/              per_image.csv and summary.json
    <out>/stages/<stage>.json          provenance: config hash, seeds, artifact hashes

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 runtime
failure, 5 output directory locked by another invocation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import zlib
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .config import ConfigError, ExperimentConfig, PRESETS, dump_config, load_config
from .data import DatasetError, balance_records, generate_synthetic, load_dataset, write_dataset
from .denoiser import ChannelMismatchError, DenoiserConfig, build_denoiser, load_predictor, save_predictor
from .discrepancy import (
    AutoencoderConfig,
    compute_features,
    discrepancy_scores,
    load_ensemble,
    save_ensemble,
    train_ensemble,
)
from .metrics import SUMMARY_SCHEMA, evaluation_summary, histogram_report, write_evaluation, write_histogram_csv
from .sampler import SamplerConfig, predict_batch, read_binary_mask, sample_mask, write_prediction
from .schedule import make_linear_schedule
from .trainer import TrainConfig, TrainingDivergedError, train_ddmd, write_loss_csv

log = logging.getLogger("ddmd")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME, EXIT_LOCKED = 0, 2, 3, 4, 5
STAGE_FORMAT = 1
ROLE_DIRS = {"mixture": "ae1", "normal_only": "ae2"}


class MissingPrerequisite(Exception):
    pass


class StageMismatch(Exception):
    pass


class LockHeld(Exception):
    pass


# --- hashing and provenance ---------------------------------------------------


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(path: Path) -> str:
    """sha256 over relative file names and contents, in sorted order."""
    path = Path(path)
    if path.is_file():
        return file_digest(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(file_digest(f).encode())
    return h.hexdigest()


def stage_seed(seed: int, name: str) -> int:
    """Independent, reproducible seed per stage."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


class Run:
    """An output directory plus the config driving it."""

    def __init__(self, cfg: ExperimentConfig, strict: bool = False):
        self.cfg, self.strict = cfg, strict
        self.out = cfg.output_dir

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    @property
    def data_rel(self) -> str:
        return os.path.relpath(self.cfg.manifest_path.parent, self.out)

    def stage_file(self, stage: str) -> Path:
        return self.path("stages", f"{stage}.json")

    def require(self, stage: str, sections: tuple[str, ...], hint: str) -> dict:
        """Load a prerequisite stage record and check it still matches."""
        f = self.stage_file(stage)
        if not f.is_file():
            raise MissingPrerequisite(f"stage {stage!r} has not been run in {self.out}; run `ddmd {hint}` first")
        rec = json.loads(f.read_text())
        problems = []
        want = self.cfg.section_hash(*sections)
        if rec.get("config_hash") != want:
            problems.append(f"config sections {', '.join(sections)} changed since {stage!r} ran")
        for rel, digest in rec.get("outputs", {}).items():
            p = self.path(rel)
            if not p.exists():
                raise MissingPrerequisite(f"artifact {p} from stage {stage!r} is missing; rerun `ddmd {hint}`")
            if tree_digest(p) != digest:
                problems.append(f"artifact {rel} was modified after stage {stage!r} wrote it")
        for msg in problems:
            if self.strict:
                raise StageMismatch(msg)
            log.warning("%s (continuing; pass --strict to make this an error)", msg)
        return rec

    def record(self, stage: str, sections: tuple[str, ...], seeds: dict, inputs: list[str], outputs: list[str],
               extra: dict | None = None) -> dict:
        rec = {
            "format": STAGE_FORMAT,
            "stage": stage,
            "config_sections": list(sections),
            "config_hash": self.cfg.section_hash(*sections),
            "seeds": seeds,
            "inputs": {rel: tree_digest(self.path(rel)) for rel in inputs},
            "outputs": {rel: tree_digest(self.path(rel)) for rel in outputs},
        }
        if extra:
            rec.update(extra)
        self.stage_file(stage).parent.mkdir(parents=True, exist_ok=True)
        self.stage_file(stage).write_text(json.dumps(rec, indent=1, sort_keys=True))
        return rec


class OutputLock:
    """Sentinel file created exclusively; a second invocation on the same directory fails."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / ".ddmd.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeld(f"{self.path} exists: another ddmd invocation is using this directory "
                           f"(delete the file if that process is gone)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


# --- shared loaders -------------------------------------------------------------


DATA_SECTIONS = ("seed", "data")
AE_SECTIONS = DATA_SECTIONS + ("autoencoder",)


def _records(run: Run):
    run.require("synth", DATA_SECTIONS, "synth")
    return load_dataset(run.cfg.manifest_path, run.cfg.data.normalization)


def _train_records(run: Run, records):
    train = [r for r in records if r.split == "train"]
    if run.cfg.data.balance:
        train = balance_records(train, run.cfg.seed)
    return train


def _ensembles(run: Run):
    for role, d in ROLE_DIRS.items():
        run.require(f"train-ae-{role}", AE_SECTIONS, f"train-ae --role {role}")
    return load_ensemble(run.path("ae1")), load_ensemble(run.path("ae2"))


def _diff_sections(variant: str) -> tuple[str, ...]:
    base = DATA_SECTIONS + ("schedule", "denoiser", "train")
    return base if variant == "mini" else base + ("autoencoder", "features")


def _schedule(cfg: ExperimentConfig):
    s = cfg.schedule
    return make_linear_schedule(s.T, s.beta_start, s.beta_end)


def _split(records, split: str):
    return records if split == "all" else [r for r in records if r.split == split]


# --- stages ---------------------------------------------------------------------


def cmd_synth(run: Run, args) -> dict:
    d = run.cfg.data
    records = generate_synthetic(d.n_normal, d.n_abnormal, d.C, d.H, d.W, seed=run.cfg.seed,
                                 lesion_fraction=tuple(d.lesion_fraction), lesion_contrast=d.lesion_contrast,
                                 test_fraction=d.test_fraction)
    data_dir = run.cfg.manifest_path.parent
    write_dataset(records, data_dir)
    back = load_dataset(run.cfg.manifest_path, normalization="none")
    if len(back) != len(records):
        raise RuntimeError("dataset reload check failed")
    rec = run.record("synth", DATA_SECTIONS, {"data": run.cfg.seed}, [], [run.data_rel],
                     {"n_records": len(records), "n_abnormal": sum(r.label for r in records)})
    print(f"synth: wrote {len(records)} slices ({rec['n_abnormal']} abnormal) to {data_dir}")
    return rec


def _ae_config(cfg: ExperimentConfig) -> AutoencoderConfig:
    a, d = cfg.autoencoder, cfg.data
    return AutoencoderConfig(in_channels=d.C, height=d.H, width=d.W, encoder_conv_layers=a.encoder_conv_layers,
                             decoder_deconv_layers=a.decoder_deconv_layers,
                             bottleneck_fc_layers=a.bottleneck_fc_layers, latent_dim=a.latent_dim,
                             width_schedule=tuple(a.width_schedule))


def cmd_train_ae(run: Run, args) -> dict:
    roles = list(ROLE_DIRS) if args.role == "both" else [args.role]
    records = _train_records(run, _records(run))
    a = run.cfg.autoencoder
    out = {}
    for role in roles:
        seed = stage_seed(run.cfg.seed, f"ae-{role}")
        module = train_ensemble(records, role, _ae_config(run.cfg), L=a.L, epochs=a.epochs, lr=a.lr, seed=seed,
                                batch_size=a.batch_size)
        save_ensemble(module, run.path(ROLE_DIRS[role]))
        out[role] = run.record(f"train-ae-{role}", AE_SECTIONS, {"ensemble": seed, "members": module.seeds},
                               [run.data_rel], [ROLE_DIRS[role]],
                               {"n_train": module.metadata["n_train"], "final_loss": module.metadata["final_loss"]})
        print(f"train-ae: {role} ensemble (L={module.L}, {module.metadata['n_train']} slices) "
              f"final loss {module.metadata['final_loss']:.5f} -> {run.path(ROLE_DIRS[role])}")
    return out


def cmd_features(run: Run, args) -> dict:
    records = _records(run)
    ae1, ae2 = _ensembles(run)
    fdir = run.path("features")
    (fdir / "maps").mkdir(parents=True, exist_ok=True)
    images = np.stack([r.modalities for r in records])
    feats = compute_features(images, ae1, ae2, normalize=run.cfg.features.normalize)
    scores = discrepancy_scores(images, ae1, ae2)
    rows = []
    for r, X, Y, s in zip(records, feats.X, feats.Y, scores):
        (fdir / "maps" / f"{r.id}.X.f32").write_bytes(np.ascontiguousarray(X, dtype="<f4").tobytes())
        (fdir / "maps" / f"{r.id}.Y.f32").write_bytes(np.ascontiguousarray(Y, dtype="<f4").tobytes())
        rows.append({"id": r.id, "label": r.label, "split": r.split, **s.to_dict()})
    (fdir / "scores.json").write_text(json.dumps({"normalized_maps": run.cfg.features.normalize, "records": rows},
                                                 indent=1))
    # histograms on held-out slices when they cover both labels
    test = [i for i, r in enumerate(records) if r.split == "test"]
    if not {records[i].label for i in test} >= {0, 1}:
        test = list(range(len(records)))
        population = "all"
    else:
        population = "test"
    report = histogram_report([scores[i] for i in test], [records[i].label for i in test],
                              bins=run.cfg.metrics.histogram_bins)
    report["population"] = population
    (fdir / "histogram.json").write_text(json.dumps(report, indent=1))
    write_histogram_csv(report, fdir / "histogram.csv")
    rec = run.record("features", AE_SECTIONS + ("features", "metrics"), {}, [run.data_rel, "ae1", "ae2"], ["features"])
    fam = report["families"]
    print(f"features: {len(records)} slices; AUROC inter {_fmt(fam['inter_global']['auroc'])} "
          f"intra {_fmt(fam['intra_global']['auroc'])} ({population} slices)")
    return rec


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def cmd_train_diff(run: Run, args) -> dict:
    cfg, variant = run.cfg, run.cfg.variant
    records = _train_records(run, _records(run))
    ae1 = ae2 = None
    inputs = [run.data_rel]
    if variant != "mini":
        ae1, ae2 = _ensembles(run)
        inputs += ["ae1", "ae2"]
    dn, tr = cfg.denoiser, cfg.train
    dcfg = DenoiserConfig(variant=variant, modalities=cfg.data.C, base_width=dn.base_width, depth=dn.depth,
                          num_res_blocks=dn.num_res_blocks, channel_mult=dn.channel_mult, dropout=dn.dropout,
                          mask_skip=dn.mask_skip)
    init_seed, train_seed = stage_seed(cfg.seed, "denoiser-init"), stage_seed(cfg.seed, "train-diff")
    predictor = build_denoiser(dcfg, init_seed)
    tcfg = TrainConfig(T=cfg.schedule.T, batch_size=tr.batch_size, lr=tr.lr, iterations=tr.iterations,
                       variant=variant, seed=train_seed, checkpoint_every=tr.checkpoint_every,
                       grad_clip=tr.grad_clip, ema_decay=tr.ema_decay, normalize_features=cfg.features.normalize,
                       use_feature_cache=tr.use_feature_cache, log_every=tr.log_every)
    ddir = run.path("diffusion", variant)
    result = train_ddmd(records, ae1, ae2, predictor, _schedule(cfg), tcfg,
                        checkpoint_dir=ddir / "intermediate" if tr.checkpoint_every else None)
    h = result.loss_history
    save_predictor(result.predictor, ddir, {"iterations": tr.iterations, "final_loss": h[-1],
                                            "init_seed": init_seed, "train_seed": train_seed})
    write_loss_csv(h, ddir / "loss.csv")
    rel = os.path.join("diffusion", variant)
    rec = run.record(f"train-diff-{variant}", _diff_sections(variant),
                     {"init": init_seed, "train": train_seed}, inputs, [rel],
                     {"variant": variant, "final_loss": h[-1]})
    tail = float(np.mean(h[-min(len(h), 100):]))
    print(f"train-diff: {variant}, {len(h)} iterations, mean loss over last {min(len(h), 100)}: {tail:.4f} -> {ddir}")
    return rec


def cmd_sample(run: Run, args) -> dict:
    cfg = run.cfg
    ckpt = Path(args.checkpoint) if args.checkpoint else run.path("diffusion", cfg.variant)
    if not args.checkpoint:
        run.require(f"train-diff-{cfg.variant}", _diff_sections(cfg.variant), f"train-diff --variant {cfg.variant}")
    if not (ckpt / "descriptor.json").is_file():
        raise MissingPrerequisite(f"no diffusion checkpoint at {ckpt}; run `ddmd train-diff` first")
    predictor = load_predictor(ckpt)
    if predictor.config.variant != cfg.variant:
        raise ChannelMismatchError(
            f"checkpoint {ckpt} was trained for variant {predictor.config.variant!r} "
            f"({predictor.config.in_channels} input channels) but --variant is {cfg.variant!r}"
        )
    records = _split(_records(run), cfg.sampler.split)
    if not records:
        raise ConfigError(f"no slices in split {cfg.sampler.split!r}")
    ae1 = ae2 = None
    if cfg.variant != "mini":
        ae1, ae2 = _ensembles(run)
    schedule = _schedule(cfg)
    sp = cfg.sampler
    base = stage_seed(cfg.seed, "sample")
    scfg = SamplerConfig(n_samples=sp.n_samples, threshold=sp.threshold, seed=base, max_batch=sp.max_batch)
    preds = predict_batch(np.stack([r.modalities for r in records]), ae1, ae2, predictor, schedule, scfg,
                          cfg.features.normalize)
    sdir = run.path("samples", cfg.variant)
    meta = {"variant": cfg.variant, "threshold": sp.threshold, "n_samples": sp.n_samples, "T": schedule.T}
    for r, p in zip(records, preds):
        snaps = None
        if sp.capture_steps:
            # the first sample's trajectory, replayed with its seed
            snaps = sample_mask(r.modalities, ae1, ae2, predictor, schedule, seed=p.seeds[0],
                                capture=sp.capture_steps, normalize_features=cfg.features.normalize).snapshots
        write_prediction(sdir, r.id, p, meta, snaps)
    (sdir / "index.json").write_text(json.dumps({"ids": [r.id for r in records], **meta}, indent=1))
    inputs = [run.data_rel, os.path.relpath(ckpt.resolve(), run.out.resolve())]
    if cfg.variant != "mini":
        inputs += ["ae1", "ae2"]
    rec = run.record(f"sample-{cfg.variant}", _diff_sections(cfg.variant) + ("sampler",), {"base": base},
                     inputs, [os.path.join("samples", cfg.variant)],
                     {"n_images": len(records)})
    print(f"sample: {len(records)} slices x {sp.n_samples} samples ({cfg.variant}) -> {sdir}")
    return rec


def cmd_eval(run: Run, args) -> dict:
    cfg = run.cfg
    run.require(f"sample-{cfg.variant}", _diff_sections(cfg.variant) + ("sampler",), f"sample --variant {cfg.variant}")
    sdir = run.path("samples", cfg.variant)
    ids = json.loads((sdir / "index.json").read_text())["ids"]
    by_id = {r.id: r for r in _records(run)}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise MissingPrerequisite(f"samples refer to unknown slices {missing[:3]}; rerun `ddmd sample`")
    preds = [read_binary_mask(sdir, i) for i in ids]
    gts = [by_id[i].mask for i in ids]
    summary = evaluation_summary(ids, preds, gts, labels=[by_id[i].label for i in ids],
                                 fold=f"seed-{cfg.seed}")
    summary.update({"variant": cfg.variant, "split": cfg.sampler.split,
                    "normalization": cfg.data.normalization})
    edir = run.path("eval", cfg.variant)
    write_evaluation(summary, edir)
    jsonschema.validate(json.loads((edir / "summary.json").read_text()), SUMMARY_SCHEMA)
    rec = run.record(f"eval-{cfg.variant}", _diff_sections(cfg.variant) + ("sampler",), {},
                     [run.data_rel, os.path.join("samples", cfg.variant)], [os.path.join("eval", cfg.variant)])
    m = summary["per_image_mean_std"]
    print(f"eval ({cfg.variant}, {len(ids)} slices): Dice {m['dice']['mean']:.4f}±{m['dice']['std']:.4f}  "
          f"mIoU {m['miou']['mean']:.4f}±{m['miou']['std']:.4f}  PA {m['pa']['mean']:.4f}±{m['pa']['std']:.4f}")
    return rec


def cmd_report(run: Run, args) -> dict:
    """Collect stage records, evaluation summaries and histogram AUROCs into report.json."""
    stages = {}
    for f in sorted(run.path("stages").glob("*.json")):
        stages[f.stem] = json.loads(f.read_text())
    if not stages:
        raise MissingPrerequisite(f"no stages have run in {run.out}")
    report = {"output_dir": str(run.out), "stages": sorted(stages), "evaluations": {}}
    for f in sorted(run.path("eval").glob("*/summary.json")):
        s = json.loads(f.read_text())
        report["evaluations"][f.parent.name] = {k: s[k] for k in ("n_images", "per_image_mean_std", "pooled")}
    hist = run.path("features", "histogram.json")
    if hist.is_file():
        fams = json.loads(hist.read_text())["families"]
        report["discrepancy"] = {k: {"auroc": v["auroc"], "overlap": v["overlap"]} for k, v in fams.items()}
    run.path("report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(json.dumps(report, indent=1, sort_keys=True))
    return report


def cmd_run(run: Run, args) -> dict:
    cmd_synth(run, args)
    args.role = "both"
    cmd_train_ae(run, args)
    cmd_features(run, args)
    cmd_train_diff(run, args)
    args.checkpoint = None
    cmd_sample(run, args)
    return cmd_eval(run, args)


def cmd_init_config(run: Run, args) -> dict:
    text = dump_config(run.cfg)
    if args.write:
        Path(args.write).write_text(text)
        print(f"wrote {args.write}")
    else:
        sys.stdout.write(text)
    return {}


COMMANDS = {
    "init-config": (cmd_init_config, "print or write the resolved configuration"),
    "synth": (cmd_synth, "generate the synthetic phantom corpus"),
    "train-ae": (cmd_train_ae, "train the mixture (AE-1) and/or normal-only (AE-2) ensembles"),
    "features": (cmd_features, "compute discrepancy maps, scores and histograms"),
    "train-diff": (cmd_train_diff, "train the conditional diffusion denoiser"),
    "sample": (cmd_sample, "sample averaged, thresholded masks"),
    "eval": (cmd_eval, "score sampled masks against ground truth"),
    "report": (cmd_report, "summarize a run directory"),
    "run": (cmd_run, "all stages: synth, train-ae, features, train-diff, sample, eval"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", help="YAML config file (see `ddmd init-config`)")
    g.add_argument("--preset", choices=sorted(PRESETS), help="start from a built-in preset")
    g.add_argument("--out", help="output directory (relative paths resolve under $DDMD_OUTPUT_ROOT if set)")
    g.add_argument("--seed", type=int, help="global seed")
    g.add_argument("--variant", choices=["mini", "light", "full"], help="conditioning variant")
    g.add_argument("--n-normal", type=int, help="healthy slices to synthesize")
    g.add_argument("--n-abnormal", type=int, help="lesion slices to synthesize")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set train.iterations=200 (value parsed as YAML)")
    g.add_argument("--strict", action="store_true", help="fail when a prerequisite stage used a different config")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="ddmd", description="Discrepancy-conditioned diffusion segmentation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("train-ae", "run"):
            p.add_argument("--role", choices=["mixture", "normal_only", "both"], default="both")
        if name in ("sample", "run"):
            p.add_argument("--checkpoint", help="denoiser checkpoint directory (default: diffusion/<variant>)")
        if name == "init-config":
            p.add_argument("--write", metavar="PATH", help="write to PATH instead of stdout")
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if args.out:
        o.setdefault("paths", {})["output_dir"] = args.out
    if args.seed is not None:
        o["seed"] = args.seed
    if args.variant:
        o["variant"] = args.variant
    if args.n_normal is not None:
        o.setdefault("data", {})["n_normal"] = args.n_normal
    if args.n_abnormal is not None:
        o.setdefault("data", {})["n_abnormal"] = args.n_abnormal
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        node = o
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(value)
    return o


def resolve_config(args) -> ExperimentConfig:
    path = args.config
    if path is None and args.preset is None and args.out:
        saved = Path(args.out) / "config.yaml"
        root = os.environ.get("DDMD_OUTPUT_ROOT")
        if root and not Path(args.out).is_absolute():
            saved = Path(root) / saved
        if saved.is_file():
            path = saved
    try:
        return load_config(path, _overrides(args), args.preset)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    fn, _ = COMMANDS[args.command]
    try:
        cfg = resolve_config(args)
        run = Run(cfg, strict=args.strict)
        if args.command == "init-config":
            fn(run, args)
            return EXIT_OK
        with OutputLock(run.out):
            (run.out / "config.yaml").write_text(dump_config(cfg))
            fn(run, args)
        return EXIT_OK
    except (ConfigError, ChannelMismatchError, StageMismatch) as exc:
        print(f"ddmd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingPrerequisite, DatasetError) as exc:
        print(f"ddmd: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except LockHeld as exc:
        print(f"ddmd: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except (TrainingDivergedError, RuntimeError, ValueError, OSError) as exc:
        log.debug("failure", exc_info=True)
        print(f"ddmd: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
