"""Command-line entry point.

Every command takes --config (a JSON run config), an --out directory
for artifacts, and an optional --seed override. The out directory is
locked for the duration of a command, and the fully resolved config is
written there before any other side effect, so an artifact directory
always says exactly what produced it.

Exit codes: 0 success, 2 configuration or usage problems, 3 artifact
fingerprint mismatches, 4 numerical failures, 5 a failed --assert.
Errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, load_run_config, write_json
from .numerics import NumericalError, SerializationError
from .repository import FingerprintError
from .workflows import (
    AcceptanceError,
    run_ablate,
    run_edit,
    run_eval,
    run_gradcheck,
    run_pretrain,
    run_sweep,
    run_train_editor,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FINGERPRINT = 3
EXIT_NUMERICAL = 4
EXIT_ASSERT = 5

LOCK_NAME = ".lock"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moedit",
        description="Lifelong model editing on a self-contained testbed",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True, help="run config JSON")
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed")
        p.add_argument("--out", required=True, help="artifact directory")
        return p

    cmd("pretrain", "train and freeze the base model on the synthetic world")
    p = cmd("train-editor", "train the editing head against the frozen model")
    p.add_argument("--checkpoint", default=None,
                   help="resume from this checkpoint bundle")
    p = cmd("edit", "apply the edit stream and save the expert repository")
    p.add_argument("--limit", type=int, default=None,
                   help="apply only the first N edits")
    p.add_argument("--repo", default=None,
                   help="write the repository here instead of OUT/repository")
    p = cmd("eval", "run the lifelong protocol and score the five metrics")
    p.add_argument("--repo", default=None,
                   help="score this existing repository instead of streaming")
    p.add_argument("--assert", dest="assert_", action="store_true",
                   help="exit 5 unless the acceptance thresholds hold")
    p = cmd("ablate", "train and score the routing ablation variants")
    p.add_argument("--assert", dest="assert_", action="store_true",
                   help="exit 5 unless the locality ordering holds by majority")
    p = cmd("sweep", "train and score over the configured capacity grid")
    p.add_argument("--assert", dest="assert_", action="store_true",
                   help="exit 5 unless capacity scaling behaves")
    p = cmd("gradcheck", "verify loss gradients against central differences")
    p.add_argument("--assert", dest="assert_", action="store_true",
                   help="exit 5 unless all terms meet the tolerance")
    cmd("report", "summarize the artifacts in an out directory",
        needs_config=False)
    return parser


class OutLock:
    """Exclusive marker file; a second command on the same dir fails fast."""

    def __init__(self, out: Path):
        self.path = out / LOCK_NAME
        self.acquired = False

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"{self.path.parent} is locked by another run "
                f"(stale? remove {self.path})") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self.acquired = True
        return self

    def __exit__(self, *exc):
        if self.acquired:
            self.path.unlink(missing_ok=True)
        return False


def _print_error(code: int, kind: str, message: str) -> None:
    print(json.dumps({"error": {"code": code, "kind": kind,
                                "message": message}}, sort_keys=True),
          file=sys.stderr)


def _report(out: Path) -> dict:
    """Collect whatever artifacts exist into one markdown summary."""
    sections = []
    found = {}
    for name in ("pretrain", "train", "edits", "metrics", "trajectory",
                 "ablation", "sweep", "gradcheck"):
        path = out / f"{name}.json"
        if path.exists():
            found[name] = json.loads(path.read_text())
    lines = ["# Run summary", ""]
    if "pretrain" in found:
        p = found["pretrain"]
        lines += ["## Base model",
                  f"- pretraining steps: {p['steps']}",
                  f"- token accuracy: {p['token_accuracy']:.4f}",
                  f"- parameters: {p['param_count']}", ""]
    if "train" in found:
        t = found["train"]
        lines += ["## Editor training",
                  f"- steps: {t['start_step']} -> {t['start_step'] + t['steps_run']}",
                  f"- final total loss: {t['final']['total']:.4f}",
                  f"- editor parameters: {t['editor_param_count']}", ""]
    if "edits" in found:
        lines += ["## Edits",
                  f"- applied: {found['edits']['edits_applied']}", ""]
    if "trajectory" in found:
        lines += ["## Lifelong metrics", "",
                  "| edits | rel | t-gen | m-gen | t-loc | m-loc | avg |",
                  "|---|---|---|---|---|---|---|"]
        for row in found["trajectory"]:
            cells = [row["n_edits"]] + [
                "-" if row[k] is None else f"{row[k]:.3f}"
                for k in ("reliability", "gen_text", "gen_modal",
                          "loc_text", "loc_modal", "average")]
            lines.append("| " + " | ".join(str(c) for c in cells) + " |")
        lines.append("")
    if "ablation" in found:
        lines += ["## Ablations",
                  f"- locality ordering majority: "
                  f"{found['ablation']['ordering_majority']}", ""]
    if "sweep" in found:
        lines += ["## Capacity sweep",
                  f"- settings scored: {len(found['sweep']['rows'])}", ""]
    if "gradcheck" in found:
        g = found["gradcheck"]
        lines += ["## Gradient check",
                  f"- max relative error: {g['max_rel_err']:.3e} "
                  f"(tolerance {g['tolerance']:.0e})", ""]
    if not found:
        lines += ["No artifacts found.", ""]
    text = "\n".join(lines)
    (out / "report.md").write_text(text)
    print(text)
    sections = sorted(found)
    return {"sections": sections}


def _dispatch(args, out: Path) -> None:
    if args.command == "report":
        _report(out)
        return
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    write_json(out / f"resolved-{args.command}.json", {
        "command": args.command,
        "seed": seed,
        "config": cfg.to_dict(),
    })
    if args.command == "pretrain":
        summary = run_pretrain(cfg, seed, out)
        print(f"pretrained to accuracy {summary['token_accuracy']:.4f} "
              f"in {summary['steps']} steps")
    elif args.command == "train-editor":
        resume = Path(args.checkpoint) if args.checkpoint else None
        summary = run_train_editor(cfg, seed, out, resume=resume)
        print(f"trained {summary['steps_run']} steps, "
              f"final loss {summary['final']['total']:.4f}")
    elif args.command == "edit":
        repo = Path(args.repo) if args.repo else None
        summary = run_edit(cfg, seed, out, limit=args.limit, repo_dir=repo)
        print(f"applied {summary['edits_applied']} edits "
              f"-> {summary['repository']}")
    elif args.command == "eval":
        repo = Path(args.repo) if args.repo else None
        final = run_eval(cfg, seed, out, repo_dir=repo,
                         assert_thresholds=args.assert_)
        parts = ", ".join(
            f"{k}={final[k]:.3f}" for k in
            ("reliability", "gen_text", "gen_modal", "loc_text", "loc_modal")
            if final[k] is not None)
        print(f"{final['n_edits']} edits: {parts}")
    elif args.command == "ablate":
        summary = run_ablate(cfg, seed, out, assert_ordering=args.assert_)
        print(f"ablation ordering majority: {summary['ordering_majority']}")
    elif args.command == "sweep":
        summary = run_sweep(cfg, seed, out, assert_flat=args.assert_)
        print(f"scored {len(summary['rows'])} sweep settings")
    elif args.command == "gradcheck":
        summary = run_gradcheck(cfg, seed, out, assert_tolerance=args.assert_)
        for term, info in summary["terms"].items():
            print(f"{term:6s} max_rel_err={info['max_rel_err']:.3e} "
                  f"({info['coords_checked']} coords, worst {info['worst_param']})")
        print(f"overall max_rel_err={summary['max_rel_err']:.3e} "
              f"tolerance={summary['tolerance']:.0e}")
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with OutLock(out):
            _dispatch(args, out)
        return EXIT_OK
    except AcceptanceError as exc:
        _print_error(EXIT_ASSERT, "assertion", str(exc))
        return EXIT_ASSERT
    except NumericalError as exc:
        _print_error(EXIT_NUMERICAL, "numerical", str(exc))
        return EXIT_NUMERICAL
    except FingerprintError as exc:
        _print_error(EXIT_FINGERPRINT, "fingerprint", str(exc))
        return EXIT_FINGERPRINT
    except (ConfigError, SerializationError, OSError, ValueError, KeyError) as exc:
        _print_error(EXIT_CONFIG, "config", str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
