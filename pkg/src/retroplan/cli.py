"""Command line: gen-world, pretrain, train, eval, ablate, report.

Settings come from built-in defaults, then an optional INI file
(``--config``), then command-line flags.  See ``docs/config.md`` in the
repository for the file grammar.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .core import CostModel
from .experiment import PLANNER_KINDS, TrainedModel, compare, make_targets
from .mcts import MctsConfig
from .nnet import CheckpointError, load_bundle, save_bundle
from .planners import CHECKPOINTS, PlannerBudget
from .policy import pretrain_reference
from .synthworld import (WorldFormatError, WorldGenerationError, dump_world, generate_world, read_world)
from .train import MODES, TrainConfig, pdvn_train

log = logging.getLogger("retroplan")

# section -> key -> default.  Types follow the defaults.
DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0, "workers": 1},
    "world": {"rules": 50, "alphabet": "ABCDEFGH", "bb_max_len": 3, "poison_fraction": 0.2},
    "data": {"n_train": 2000, "n_test": 200, "route_depth": 8, "test_min_depth": 5},
    "pretrain": {"epochs": 8, "hidden": 512},
    "mcts": {"c_puct": 1.0, "simulations": 100, "max_depth": 15, "top_k": 50, "c_rxn": 0.1, "c_dead": 5.0,
             "root_order": "fifo", "eliminate_ancestor_templates": True, "reuse_tree": True,
             "temperature": 1.0},
    "train": {"mode": "pdvn", "target_batch": 1024, "minibatch": 128, "lr": 1e-3, "epochs": 3, "alpha": 0.8,
              "passes": 1, "dedup": "keep-all", "imitation_budget": 100, "hidden": 512, "record_time": True},
    "eval": {"budget": 500, "checkpoints": ",".join(map(str, CHECKPOINTS)), "planners": "retro0",
             "prior_weight": 1.0, "stop": "first"},
    "ablate": {"modes": ",".join(MODES)},
}

# flag -> (section, key)
FLAG_MAP = {
    "seed": ("run", "seed"), "workers": ("run", "workers"), "simulations": ("mcts", "simulations"),
    "c_puct": ("mcts", "c_puct"), "c_dead": ("mcts", "c_dead"), "c_rxn": ("mcts", "c_rxn"),
    "top_k": ("mcts", "top_k"), "max_depth": ("mcts", "max_depth"), "mode": ("train", "mode"),
    "budget": ("eval", "budget"), "root_order": ("mcts", "root_order"), "rules": ("world", "rules"),
    "epochs": ("train", "epochs"), "planners": ("eval", "planners"), "modes": ("ablate", "modes"),
    "n_train": ("data", "n_train"), "n_test": ("data", "n_test"),
}


class ConfigError(ValueError):
    pass


def _coerce(section: str, key: str, raw: Any) -> Any:
    default = DEFAULTS[section][key]
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]

    @classmethod
    def resolve(cls, config_path: Optional[str], overrides: dict[str, Any]) -> "RunConfig":
        values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        if config_path:
            parser = configparser.ConfigParser()
            try:
                with open(config_path) as fh:
                    parser.read_file(fh)
            except (OSError, configparser.Error) as exc:
                raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
            for section in parser.sections():
                if section not in DEFAULTS:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, raw in parser.items(section):
                    if key not in DEFAULTS[section]:
                        raise ConfigError(f"unknown key {key!r} in [{section}]")
                    values[section][key] = _coerce(section, key, raw)
        for flag, value in overrides.items():
            if value is None:
                continue
            section, key = FLAG_MAP[flag]
            values[section][key] = _coerce(section, key, value)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self["run"]["seed"]

    @property
    def workers(self) -> int:
        return self["run"]["workers"]

    def cost(self) -> CostModel:
        return CostModel(self["mcts"]["c_rxn"], self["mcts"]["c_dead"])

    def mcts(self) -> MctsConfig:
        m = dict(self["mcts"])
        cost = CostModel(m.pop("c_rxn"), m.pop("c_dead"))
        return MctsConfig(cost=cost, **m)

    def train_cfg(self, mode: Optional[str] = None) -> TrainConfig:
        t = dict(self["train"])
        t.pop("record_time")
        if mode is not None:
            t["mode"] = mode
        return TrainConfig(**t)

    def budget(self) -> PlannerBudget:
        try:
            cps = tuple(int(x) for x in self["eval"]["checkpoints"].split(","))
        except ValueError:
            raise ConfigError("[eval] checkpoints must be comma-separated integers") from None
        n = self["eval"]["budget"]
        cps = tuple(sorted({c for c in cps if c <= n} | {n}))  # always report the full budget
        return PlannerBudget(n, cps)

    def planners(self) -> list[str]:
        names = [p.strip() for p in self["eval"]["planners"].split(",") if p.strip()]
        for p in names:
            if p not in PLANNER_KINDS:
                raise ConfigError(f"unknown planner {p!r}; choose from {', '.join(PLANNER_KINDS)}")
        return names

    def ablate_modes(self) -> list[str]:
        modes = [m.strip() for m in self["ablate"]["modes"].split(",") if m.strip()]
        for m in modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}")
        return modes

    def validate(self) -> None:
        """Build every typed config once so conflicts surface before any work."""
        try:
            self.cost()
            self.mcts()
            self.train_cfg()
            self.budget()
            self.planners()
            self.ablate_modes()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self["eval"]["stop"] not in ("first", "optimal"):
            raise ConfigError("[eval] stop must be first or optimal")
        if self["world"]["rules"] < 10:
            raise ConfigError("[world] rules must be >= 10")
        d = self["data"]
        if min(d["n_train"], d["n_test"]) < 1:
            raise ConfigError("[data] n_train and n_test must be >= 1")
        if not 1 <= d["test_min_depth"] <= d["route_depth"]:
            raise ConfigError("[data] test_min_depth must lie in 1..route_depth")

    def digest(self) -> str:
        """Hash of every setting except the worker count (which never changes results)."""
        body = {s: {k: v for k, v in kv.items() if (s, k) != ("run", "workers")} for s, kv in self.values.items()}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def header(self) -> str:
        return f"# retroplan config_hash={self.digest()} seed={self.seed} workers={self.workers}\n"


# ---- file helpers ---------------------------------------------------------------


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _read_lines(path: Path) -> list[str]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc.strerror}") from exc
    return [ln for ln in text.splitlines() if ln and not ln.startswith("#")]


def _load_world(path) -> Any:
    try:
        return read_world(path)
    except OSError as exc:
        raise FileNotFoundError(f"cannot read world file {path}: {exc.strerror}") from exc


def _write_targets(path: Path, molecules, cfg: RunConfig) -> None:
    _write(path, cfg.header() + "".join(m + "\n" for m in molecules))


def _load_reference(pretrained: Path):
    nets, _ = load_bundle(pretrained)
    if "reference" not in nets:
        raise CheckpointError(f"{pretrained} has no reference network")
    return nets["reference"]


# ---- commands -----------------------------------------------------------------------


def cmd_gen_world(args, cfg: RunConfig) -> int:
    w = cfg["world"]
    world = generate_world(w["rules"], cfg.seed, alphabet=w["alphabet"], bb_max_len=w["bb_max_len"],
                           poison_fraction=w["poison_fraction"])
    _write(Path(args.out), dump_world(world) + f"config_hash\t{cfg.digest()}\n")
    print(f"wrote {args.out}: {len(world.rules)} rules, seed {cfg.seed}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    world = _load_world(args.world)
    d = cfg["data"]
    targets = make_targets(world, d["n_train"], d["n_test"], d["route_depth"], cfg.seed,
                           test_min_depth=d["test_min_depth"])
    out = Path(args.out)
    ref, report = pretrain_reference(world, targets.corpus, epochs=cfg["pretrain"]["epochs"], seed=cfg.seed,
                                     top_k=cfg["mcts"]["top_k"], hidden=cfg["pretrain"]["hidden"])
    save_bundle({"reference": ref}, out, {"config_hash": cfg.digest(), "seed": cfg.seed, "kind": "pretrained"})
    _write_targets(out / "train_targets.txt", targets.train, cfg)
    _write_targets(out / "test_targets.txt", targets.test, cfg)
    buf = io.StringIO()
    buf.write(cfg.header())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for i, loss in enumerate(report.epoch_losses, 1):
        w.writerow([i, f"{loss:.6f}"])
    buf.write(f"# heldout_top1={report.top1:.6f} heldout_top{cfg['mcts']['top_k']}={report.top50:.6f} "
              f"n_train={report.n_train} n_heldout={report.n_heldout}\n")
    _write(out / "pretrain.csv", buf.getvalue())
    print(f"reference: held-out top-1 {report.top1:.3f}, top-{cfg['mcts']['top_k']} {report.top50:.3f}")
    return 0


def _train_one(world, reference, train_targets, cfg: RunConfig, mode: str, out: Path):
    res = pdvn_train(world, train_targets, reference, cfg.train_cfg(mode), cfg.mcts(), cfg.seed,
                     workers=cfg.workers, log_path=out / "train_log.csv", checkpoint_dir=out / "epochs",
                     record_time=cfg["train"]["record_time"], header=cfg.header())
    save_bundle(res.bundle(), out / "model", {"config_hash": cfg.digest(), "seed": cfg.seed, "mode": mode})
    return res


def cmd_train(args, cfg: RunConfig) -> int:
    world = _load_world(args.world)
    pretrained = Path(args.pretrained)
    reference = _load_reference(pretrained)
    train_targets = _read_lines(pretrained / "train_targets.txt")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = _train_one(world, reference, train_targets, cfg, cfg["train"]["mode"], out)
    last = res.log[-1]
    print(f"trained {res.mode}: {len(res.log)} batches, final solve rate {last.solve_rate:.3f}")
    return 0


def _model_from_dir(path: Path, top_k: int) -> TrainedModel:
    nets, meta = load_bundle(path)
    if set(nets) == {"reference"}:
        return TrainedModel.supervised(nets["reference"], top_k)
    return TrainedModel.from_bundle(nets, meta.get("mode", "pdvn"), top_k)


def _eval_kw(cfg: RunConfig) -> dict:
    return {"max_depth": cfg["mcts"]["max_depth"], "prior_weight": cfg["eval"]["prior_weight"],
            "stop": cfg["eval"]["stop"]}


def cmd_eval(args, cfg: RunConfig) -> int:
    world = _load_world(args.world)
    test = _read_lines(Path(args.targets))
    if not test:
        raise ValueError(f"{args.targets} lists no targets")
    top_k = cfg["mcts"]["top_k"]
    models: dict[str, tuple[str, TrainedModel]] = {}
    sources = [("sl", Path(args.pretrained))] if args.pretrained else []
    if args.checkpoint:
        sources.append(("trained", Path(args.checkpoint)))
    if not sources:
        raise ValueError("eval needs --pretrained and/or --checkpoint")
    for label, path in sources:
        model = _model_from_dir(path, top_k)
        for kind in cfg.planners():
            if kind == "retro-value" and model.vsyn is None and model.vcost is None:
                raise ValueError(f"planner retro-value needs value networks, none in {path}")
            models[f"{kind}-{model.mode}"] = (kind, model)
    report = compare(world, test, models, cfg.budget(), cfg.cost(), **_eval_kw(cfg))
    out = Path(args.out)
    _write(out / "eval.csv", report.to_csv(cfg.header()))
    _write(out / "summary.txt", cfg.header() + report.summary())
    print(report.summary(), end="")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    world = _load_world(args.world)
    pretrained = Path(args.pretrained)
    reference = _load_reference(pretrained)
    train_targets = _read_lines(pretrained / "train_targets.txt")
    test = _read_lines(pretrained / "test_targets.txt")
    out = Path(args.out)
    top_k = cfg["mcts"]["top_k"]
    models: dict[str, tuple[str, TrainedModel]] = {"retro0-sl": ("retro0", TrainedModel.supervised(reference, top_k))}
    for mode in cfg.ablate_modes():
        res = _train_one(world, reference, train_targets, cfg, mode, out / mode)
        model = TrainedModel.from_result(res)
        models[f"retro0-{mode}"] = ("retro0", model)
        if mode != "self-imitation":
            models[f"retro-value-{mode}"] = ("retro-value", model)
    report = compare(world, test, models, cfg.budget(), cfg.cost(), **_eval_kw(cfg))
    _write(out / "ablation.csv", report.to_csv(cfg.header()))
    _write(out / "summary.txt", cfg.header() + report.summary())
    print(report.summary(), end="")
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    """Merge eval/ablation CSVs into one table at the largest common budget and at ``--at``."""
    rows = []
    for path in args.inputs:
        body = "\n".join(_read_lines(Path(path)))
        for r in csv.DictReader(io.StringIO(body)):
            r["source"] = path
            rows.append(r)
    if not rows:
        raise ValueError("no report rows found")
    at = str(args.at)
    picked = [r for r in rows if r["budget"] == at]
    if not picked:
        raise ValueError(f"no rows at budget {at}")
    buf = io.StringIO()
    buf.write(cfg.header())
    head = f"{'source':<32}{'planner':<26}{'success@' + at:>12}{'#calls(solved)':>16}{'len(common)':>13}\n"
    buf.write(head)
    for r in picked:
        buf.write(f"{Path(r['source']).parent.name + '/' + Path(r['source']).name:<32}{r['planner']:<26}"
                  f"{100 * float(r['success_rate']):>12.2f}{float(r['avg_calls_solved']):>16.1f}"
                  f"{float(r['avg_length_common']):>13.3f}\n")
    text = buf.getvalue()
    if args.out:
        _write(Path(args.out), text)
    print(text, end="")
    return 0


# ---- argument parsing ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [run]/[world]/[data]/[pretrain]/[mcts]/[train]/[eval] sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--simulations", type=int)
    p.add_argument("--c-puct", type=float)
    p.add_argument("--c-dead", type=float)
    p.add_argument("--c-rxn", type=float)
    p.add_argument("--top-k", type=int)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--budget", type=int)
    p.add_argument("--root-order", choices=("fifo", "lifo"))
    p.add_argument("--epochs", type=int, help="PDVN training epochs over the target set")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--no-timing", action="store_true", help="write 0 for wall_ms so logs compare byte for byte")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retroplan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a synthetic reaction world")
    _common(p)
    p.add_argument("--rules", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("pretrain", help="sample targets and train the reference template classifier")
    _common(p)
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="alternate MCTS planning and network updates")
    _common(p)
    p.add_argument("--world", required=True)
    p.add_argument("--pretrained", required=True, help="directory written by pretrain")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run planners on held-out targets")
    _common(p)
    p.add_argument("--world", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--pretrained", help="directory written by pretrain (supervised policy)")
    p.add_argument("--checkpoint", help="model directory written by train")
    p.add_argument("--planners", help=f"comma-separated subset of {','.join(PLANNER_KINDS)}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every mode and evaluate them side by side")
    _common(p)
    p.add_argument("--world", required=True)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--modes", help=f"comma-separated subset of {','.join(MODES)}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge evaluation CSVs into one table")
    _common(p)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--at", type=int, default=100, help="budget checkpoint to tabulate")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = {k: getattr(args, k, None) for k in FLAG_MAP}
    try:
        cfg = RunConfig.resolve(args.config, overrides)
        if args.no_timing:
            cfg["train"]["record_time"] = False
        return args.func(args, cfg)
    except (ConfigError, CheckpointError, WorldFormatError, WorldGenerationError, FileNotFoundError,
            ValueError) as exc:
        print(f"retroplan {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
