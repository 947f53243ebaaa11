"""Stage-per-command pipeline driver.

Stages hand off through files inside the run directory::

    data/{source,target}/...     synth (Market-style folders + manifests)
    gan/generator.pt             train-gan
    translated/                  translate (images + manifest)
    models/<name>.pt             train-reid, finetune
    features/<model>/*.emb       extract (EMB1)
    softlabels.slm               softlabel (SLM1)
    reports/<model>.txt          eval
    report.md                    report

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .benchmark import BenchmarkSpec, make_domains
from .data import SOURCE, TARGET, Dataset, DomainConfig, load_reid_directory, read_dataset_dir, write_dataset_dir
from .errors import ConfigError, DataError, ReidError
from .evaluation import evaluate_embeddings, read_report, write_report
from .gan import load_checkpoint, save_checkpoint, train_stargan, translate_dataset, build_networks
from .reid import extract_features, load_model, read_embeddings, save_model, train_baseline, write_embeddings
from .softlabel import finetune, read_soft_labels, soft_label_all, write_soft_labels

logger = logging.getLogger("camstyle_reid")

COMMANDS = ("synth", "train-gan", "translate", "train-reid", "extract", "softlabel", "finetune", "eval", "report")
MODEL_NAMES = ("na", "translated", "finetuned")


class Run:
    """Resolved config plus path helpers for one run directory."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["out"])

    @property
    def size(self):
        return (self.cfg["image_height"], self.cfg["image_width"])

    def source_root(self) -> Path:
        return Path(self.cfg["source_dir"]) if self.cfg["source_dir"] else self.out / "data" / "source"

    def target_root(self) -> Path:
        return Path(self.cfg["target_dir"]) if self.cfg["target_dir"] else self.out / "data" / "target"

    def checkpoint(self) -> Path:
        return Path(self.cfg["gan_checkpoint"]) if self.cfg["gan_checkpoint"] else self.out / "gan" / "generator.pt"

    def model_path(self, name: str) -> Path:
        return self.out / "models" / f"{name}.pt"

    def features(self, model: str, which: str) -> Path:
        return self.out / "features" / model / f"{which}.emb"

    def _load(self, root: Path, split: str, domain: int, labeled: bool, config: DomainConfig) -> Dataset:
        return load_reid_directory(root, split, config, domain_index=domain, labeled=labeled,
                                   size=self.size, strict=self.cfg["strict_filenames"])

    def domain_config(self) -> DomainConfig:
        """Camera counts from config, or inferred from training filenames."""
        cams = []
        for key, root in (("source_cameras", self.source_root()), ("target_cameras", self.target_root())):
            n = self.cfg[key]
            if n <= 0:
                n = _infer_cameras(root)
            cams.append(n)
        ids = _count_identities(self.source_root())
        return DomainConfig((cams[0], cams[1]), max(ids, 1))

    def source_train(self, config):
        return self._load(self.source_root(), "train", SOURCE, True, config)

    def target_train(self, config):
        return self._load(self.target_root(), "train", TARGET, False, config)

    def target_split(self, split, config):
        return self._load(self.target_root(), split, TARGET, True, config)

    def translated(self, config):
        return read_dataset_dir(self.out / "translated", config, self.size)


def _train_dir(root: Path) -> Path:
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    for name in ("bounding_box_train", "train"):
        if (root / name).is_dir():
            return root / name
    return root


def _infer_cameras(root: Path) -> int:
    from .data import FILENAME_RE

    cams = [int(m.group("cam")) for f in sorted(_train_dir(root).iterdir()) if (m := FILENAME_RE.match(f.name))]
    if not cams:
        raise DataError(f"cannot infer camera count: no parseable images under {root}")
    return max(cams)


def _count_identities(root: Path) -> int:
    from .data import FILENAME_RE

    return len({m.group("pid") for f in _train_dir(root).iterdir() if (m := FILENAME_RE.match(f.name))})


def _seed_everything(cfg):
    torch.manual_seed(cfg["seed"])
    np.random.seed(cfg["seed"] % 2**32)
    if cfg["deterministic"]:
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(run: Run):
    cfg = run.cfg
    spec = BenchmarkSpec(
        source_identities=cfg["synth_source_identities"], source_samples=cfg["synth_source_samples"],
        target_train_identities=cfg["synth_target_train_identities"],
        target_train_samples=cfg["synth_target_train_samples"],
        target_test_identities=cfg["synth_target_test_identities"],
        target_test_samples=cfg["synth_target_test_samples"],
        height=cfg["image_height"], width=cfg["image_width"],
    )
    d = make_domains(spec, cfg["seed"])
    src, tgt = run.out / "data" / "source", run.out / "data" / "target"
    write_dataset_dir(d["source"], src / "train")
    write_dataset_dir(d["target_train"], tgt / "train")
    write_dataset_dir(d["target_query"], tgt / "query")
    write_dataset_dir(d["target_gallery"], tgt / "gallery")
    for name, ds in d.items():
        logger.info("synth %s: %d images", name, len(ds))
    return {name: len(ds) for name, ds in d.items()}


def cmd_train_gan(run: Run):
    config = run.domain_config()
    source, target = run.source_train(config), run.target_train(config)
    hp = cfgmod.gan_params(run.cfg)
    ckpt_dir = run.checkpoint().parent
    torch.manual_seed(run.cfg["seed"])
    G, D = build_networks(config, hp, source.image_shape[1:])
    G, log = train_stargan(source, target, hp, run.cfg["seed"], config, checkpoint_dir=ckpt_dir, networks=(G, D))
    save_checkpoint(run.checkpoint(), G, D, hp, config, hp.total_iters, source.image_shape[1:])
    lines = ["iteration adv_d adv_g cls_d cls_g rec gp total_d total_g"]
    lines += [" ".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in r.as_dict().values()) for r in log]
    (ckpt_dir / "loss_log.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return run.checkpoint()


def cmd_translate(run: Run):
    G, _, _, ck_config, _, _ = load_checkpoint(run.checkpoint())
    config = run.domain_config()
    if config.cameras_per_domain != ck_config.cameras_per_domain:
        raise DataError(f"checkpoint cameras {ck_config.cameras_per_domain} != data cameras {config.cameras_per_domain}")
    source = run.source_train(config)
    translated = translate_dataset(G, source, config, run.cfg["seed"])
    return write_dataset_dir(translated, run.out / "translated")


def cmd_train_reid(run: Run):
    variant = run.cfg["variant"]
    if variant not in ("na", "translated"):
        raise ConfigError(f"variant must be 'na' or 'translated', got {variant!r}")
    config = run.domain_config()
    data = run.source_train(config) if variant == "na" else run.translated(config)
    model = train_baseline(data, cfgmod.reid_params(run.cfg), run.cfg["seed"], config.identity_count_source)
    return save_model(model, run.model_path(variant))


def _model_name(run: Run, key="model") -> str:
    name = run.cfg[key]
    if name not in MODEL_NAMES:
        raise ConfigError(f"{key} must be one of {MODEL_NAMES}, got {name!r}")
    return name


def cmd_extract(run: Run):
    name = _model_name(run)
    model = load_model(run.model_path(name))
    config = run.domain_config()
    sets = {
        "target_train": run.target_train(config),
        "query": run.target_split("query", config),
        "gallery": run.target_split("gallery", config),
    }
    if (run.out / "translated").is_dir():
        sets["translated"] = run.translated(config)
    written = []
    for which, data in sets.items():
        emb = extract_features(model, data, normalize=run.cfg["normalize"])
        written.append(write_embeddings(emb, run.features(name, which)))
    return written


def cmd_softlabel(run: Run):
    name = _model_name(run, "softlabel_model")
    target = read_embeddings(run.features(name, "target_train"))
    source = read_embeddings(run.features(name, "translated"))
    num_classes = load_model(run.model_path(name)).num_classes
    soft = soft_label_all(target, source, cfgmod.soft_params(run.cfg), num_classes)
    return write_soft_labels(soft, run.out / "softlabels.slm")


def cmd_finetune(run: Run):
    name = _model_name(run, "softlabel_model")
    model = load_model(run.model_path(name))
    config = run.domain_config()
    target = run.target_train(config)
    soft = read_soft_labels(run.out / "softlabels.slm")
    hp = cfgmod.reid_params(run.cfg)
    needs_source = hp.finetune_alpha > 0 or hp.refresh_every > 0
    source = run.translated(config) if needs_source else None
    tuned = finetune(model, target, soft, hp, run.cfg["seed"], source=source,
                     source_embeddings_from=source if hp.refresh_every else None)
    return save_model(tuned, run.model_path("finetuned"))


def cmd_eval(run: Run):
    name = _model_name(run)
    report = evaluate_embeddings(read_embeddings(run.features(name, "query")),
                                 read_embeddings(run.features(name, "gallery")),
                                 exclude_same_camera=run.cfg["exclude_same_camera"])
    logger.info("%s: rank1 %.4f mAP %.4f", name, report.rank_accuracies[1], report.mAP)
    return write_report(report, run.out / "reports" / f"{name}.txt")


ROW_TITLES = {"na": "No adaptation", "translated": "Translated source", "finetuned": "Soft-label fine-tuned"}


def cmd_report(run: Run):
    header = "| Method | rank-1 | rank-5 | rank-10 | mAP |"
    lines = [header, "|---|---|---|---|---|"]
    for name in MODEL_NAMES:
        path = run.out / "reports" / f"{name}.txt"
        if not path.is_file():
            lines.append(f"| {ROW_TITLES[name]} | absent | absent | absent | absent |")
            continue
        r = read_report(path)
        lines.append(f"| {ROW_TITLES[name]} | {100 * r['rank1']:.1f} | {100 * r['rank5']:.1f} | "
                     f"{100 * r['rank10']:.1f} | {100 * r['mAP']:.1f} |")
    table = "\n".join(lines) + "\n"
    (run.out / "report.md").write_text(table, encoding="utf-8")
    print(table, end="")
    return run.out / "report.md"


HANDLERS = {
    "synth": cmd_synth, "train-gan": cmd_train_gan, "translate": cmd_translate, "train-reid": cmd_train_reid,
    "extract": cmd_extract, "softlabel": cmd_softlabel, "finetune": cmd_finetune, "eval": cmd_eval,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _parse_overrides(extra: list[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs for config keys."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument: {tok}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            value = extra[i + 1]
            i += 2
        key = key.replace("-", "_")
        if key not in cfgmod.DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camstyle-reid", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _parse_overrides(extra)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        cfg = cfgmod.load_config(args.config, overrides)
        run = Run(cfg)
        run.out.mkdir(parents=True, exist_ok=True)
        (run.out / cfgmod.RESOLVED_NAME.format(command=args.command)).write_text(
            cfgmod.format_config(cfg), encoding="utf-8")
        _seed_everything(cfg)
        HANDLERS[args.command](run)
    except ReidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
