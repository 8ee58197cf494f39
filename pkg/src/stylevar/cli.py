"""Command-line entry point: ``stylevar <subcommand> ...``.

Failures print a single ``error: <Kind>: <message>`` line to stderr and exit
with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, RunConfig, describe_defaults

EXIT_FAILURE = 1
EXIT_USAGE = 2


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Point every seed in the config at ``seed``."""
    r = dataclasses.replace
    return r(cfg, seed=seed, data=r(cfg.data, seed=seed), tokenizer=r(cfg.tokenizer, seed=seed),
             model=r(cfg.model, seed=seed), sft=r(cfg.sft, seed=seed), grpo=r(cfg.grpo, seed=seed),
             sampler=r(cfg.sampler, seed=seed))


def _progress(every: int):
    def cb(row):
        if int(row["step"]) % every == 0:
            logging.getLogger("stylevar").info(json.dumps({k: v for k, v in row.items() if v != ""}))
    return cb


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import data_root, directory_hash, write_dataset

    cfg = _load_config(args)
    out = Path(args.out) if args.out else data_root(cfg.data.root)
    n = args.n if args.n is not None else cfg.data.n
    write_dataset(out, n, cfg.data.seed, cfg.data.image_size)
    print(json.dumps({"out": str(out), "n": n, "seed": cfg.data.seed, "sha256": directory_hash(out)}))
    return 0


def cmd_sft(args) -> int:
    from .pipeline import load_triplets, sft_stage

    cfg = _load_config(args)
    triplets = load_triplets(cfg, args.data)
    sft_stage(cfg, triplets, args.out, resume=args.resume, on_step=_progress(args.log_every))
    print(json.dumps({"out": args.out, "final": str(Path(args.out) / "sft_final.ckpt")}))
    return 0


def cmd_grpo(args) -> int:
    from .pipeline import grpo_stage, load_triplets

    cfg = _load_config(args)
    triplets = load_triplets(cfg, args.data)
    _, model, state = grpo_stage(cfg, triplets, args.init, args.out, resume=args.resume,
                                 on_step=_progress(args.log_every))
    print(json.dumps({"out": args.out, "merges": len(state.merges), "reward_ema": state.ema}))
    return 0


def cmd_sample(args) -> int:
    from .checkpoint import load_training_state
    from .data import read_image, write_image
    from .pipeline import eval_sampler, render

    cfg = _load_config(args)
    st = load_training_state(args.ckpt, reference=args.reference)
    content, style = read_image(args.content), read_image(args.style)
    size = st.config.data.image_size
    for name, img in (("content", content), ("style", style)):
        if img.shape[:2] != (size, size):
            raise ValueError(f"{name} image is {img.shape[1]}x{img.shape[0]}, model expects {size}x{size}")
    sampler = eval_sampler(cfg, greedy=args.greedy)
    seed = cfg.sampler.seed if args.seed is None else args.seed
    img = render(st.model, st.tokenizer, content, style, sampler, seed,
                 mode="reference" if args.reference else "current")
    write_image(args.out, img)
    print(json.dumps({"out": args.out, "seed": seed}))
    return 0


def cmd_eval(args) -> int:
    from .pipeline import eval_stage, load_triplets

    cfg = _load_config(args)
    triplets = load_triplets(cfg, args.data)
    summary = eval_stage(cfg, triplets, args.ckpt, args.out, greedy=not args.sampled,
                         baseline=not args.no_baseline)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_panw_table(args) -> int:
    from .grpo import panw_table
    from .tokenizer import FULL_SCHEDULE, ScaleSchedule

    sides = FULL_SCHEDULE if args.schedule is None else tuple(int(s) for s in args.schedule.split(","))
    sched = ScaleSchedule(sides)
    rows = panw_table(sched, args.alpha)
    if args.json:
        print(json.dumps(rows))
        return 0
    print(f"{'side':>4} {'tokens':>6} {'w_k (x1e-2)':>12} {'scale mass':>11}")
    for r in rows:
        print(f"{r['side']:>4} {r['tokens']:>6} {r['per_token_x100']:>12.2f} {r['scale_mass']:>11.4f}")
    first, last = rows[0]["per_token_x100"], rows[-1]["per_token_x100"]
    total = sum(r["scale_mass"] for r in rows)
    print(f"tokens={sched.total_tokens} sum={total:.15f} first/last={first / last:.2f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import run_suite

    results = run_suite(tol=args.tol, seed=args.seed if args.seed is not None else 0)
    worst = max(r.max_rel_error for _, r in results)
    for name, r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {name} max_rel_error={r.max_rel_error:.3e}")
    print(f"worst={worst:.3e} tol={args.tol:.0e}")
    return 0 if all(r.passed for _, r in results) else EXIT_FAILURE


# -- parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: UsageError: {message}\n")
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; unknown keys are rejected")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--deterministic", action="store_true",
                        help="per-sample gradient reduction in canonical order")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="stylevar", formatter_class=argparse.RawDescriptionHelpFormatter,
                description="Scale-wise autoregressive style transfer on synthetic triplets.",
                epilog="config keys (defaults):\n" + describe_defaults())
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic triplet dataset")
    g.add_argument("--out", help="output directory (default: $STYLEVAR_DATA_ROOT or data.root)")
    g.add_argument("--n", type=int, help="number of triplets (default: data.n)")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("sft", parents=[common], help="supervised next-scale training")
    s.add_argument("--data", help="dataset dir (default: regenerate from data.* config)")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="SFT checkpoint to continue from")
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_sft)

    r = sub.add_parser("grpo", parents=[common], help="adapter-only GRPO from an SFT checkpoint")
    r.add_argument("--init", required=True, help="SFT checkpoint")
    r.add_argument("--data")
    r.add_argument("--out", required=True)
    r.add_argument("--resume", help="GRPO checkpoint to continue from")
    r.add_argument("--log-every", type=int, default=10)
    r.set_defaults(func=cmd_grpo)

    m = sub.add_parser("sample", parents=[common], help="stylize one content/style pair")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--content", required=True)
    m.add_argument("--style", required=True)
    m.add_argument("--out", required=True, help="output .ppm or .png")
    m.add_argument("--greedy", action="store_true")
    m.add_argument("--reference", action="store_true", help="sample with adapters disabled")
    m.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", parents=[common], help="held-out metrics for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--out", required=True)
    e.add_argument("--sampled", action="store_true", help="score top-k/top-p samples instead of greedy")
    e.add_argument("--no-baseline", action="store_true", help="skip the AdaIN baseline")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("panw-table", parents=[common], help="print per-scale PANW weights")
    t.add_argument("--alpha", type=float, default=0.7)
    t.add_argument("--schedule", help="comma-separated sides (default: 1,2,3,4,5,6,8,10,13,16)")
    t.add_argument("--json", action="store_true")
    t.set_defaults(func=cmd_panw_table)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every primitive")
    c.add_argument("--tol", type=float, default=1e-5)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, RuntimeError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        sys.stderr.write(f"error: {type(exc).__name__}: {msg}\n")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
