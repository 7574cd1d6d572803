"""Command-line entry point: ``synth``, ``solve``, ``eval`` and ``inspect-corr``.

Exit codes: 0 success, 1 usage error or missing input, 2 ill-conditioned
input, 3 unreadable/malformed file or failed write.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import io as fio
from .features import build_pyramid, correlation_slice, extract_features
from .losses import DEMON_COLUMNS, DEPTH_COLUMNS, LossError, demon_depth_metrics, depth_metrics, format_table, pose_metrics, to_csv
from .solver import IllConditionedError, SolverError, solve
from .synth import SceneError, gen_scene, verify_pair

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ILL_CONDITIONED = 2
EXIT_IO = 3

log = logging.getLogger("corrsfm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _output_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise fio.FormatError(f"cannot create {out}: {exc}") from exc
    return out


def _load_config(path):
    return fio.load_config(_existing(path)) if path else fio.RunConfig()


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    scene = cfg.scene
    if args.seed is not None:
        scene = replace(scene, seed=args.seed)
        cfg = replace(cfg, scene=scene)
    out = _output_dir(args.out)
    pair = gen_scene(scene)
    fio.write_image(out / "target.pgm", pair.I_t)
    fio.write_image(out / "source.pgm", pair.I_s)
    fio.write_pfm(out / "depth_gt.pfm", pair.D_gt)
    fio.write_poses(out / "pose_gt.txt", pair.T_gt)
    fio.write_intrinsics(out / "intrinsics.txt", pair.K)
    report = verify_pair(pair)
    (out / "verify.txt").write_text("".join(f"{k} = {v:.9g}\n" for k, v in report.items()))
    (out / "config.txt").write_text(fio.dump_config(cfg))
    print(f"wrote scene seed={scene.seed} to {out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    target = fio.read_image(_existing(args.target))
    source = fio.read_image(_existing(args.source))
    K = fio.read_intrinsics(_existing(args.intrinsics))
    cfg = _load_config(args.config)
    out = _output_dir(args.out)
    sol = solve(target, source, K, cfg.solver)
    fio.write_pfm(out / "depth.pfm", sol.depth)
    fio.write_poses(out / "pose.txt", sol.pose)
    lines = sol.diagnostics.log_lines()
    lines.append(f"depth_unconstrained={int(sol.diagnostics.depth_unconstrained)}")
    (out / "diagnostics.log").write_text("\n".join(lines) + "\n")
    print(f"ll={sol.diagnostics.ll[-1]:.9g} wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.pred_pose is None) != (args.gt_pose is None):
        raise UsageError("--pred-pose and --gt-pose must be given together")
    pred = fio.read_pfm(_existing(args.pred_depth))
    gt = fio.read_pfm(_existing(args.gt_depth))
    row = dict(depth_metrics(pred, gt, align=args.align_scale))
    row.update(demon_depth_metrics(pred, gt))
    columns = list(DEPTH_COLUMNS) + list(DEMON_COLUMNS)
    if args.pred_pose:
        pm = pose_metrics(fio.read_pose(_existing(args.pred_pose)), fio.read_pose(_existing(args.gt_pose)))
        row.update(Rot=pm["Rot"], Tran=pm["Tran"])
        columns += ["Rot", "Tran"]
    sys.stdout.write(format_table([dict(metric=c, value=row[c]) for c in columns], ("metric", "value")))
    if args.csv:
        try:
            Path(args.csv).write_text(to_csv([row], columns))
        except OSError as exc:
            raise fio.FormatError(f"cannot write {args.csv}: {exc}") from exc
    return EXIT_OK


def _parse_at(text: str):
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--at expects 'x,y' integers, got {text!r}") from None
    return x, y


def cmd_inspect_corr(args) -> int:
    x, y = _parse_at(args.at)
    target = fio.read_image(_existing(args.target))
    source = fio.read_image(_existing(args.source))
    F_t = extract_features(target, args.backend)
    F_s = extract_features(source, args.backend)
    if F_t.grid.shape != F_s.grid.shape:
        raise UsageError(f"images differ in size: {target.shape} vs {source.shape}")
    P = build_pyramid(F_t, F_s)
    h, w = P.shape
    if not (0 <= x < w and 0 <= y < h):
        raise UsageError(f"--at {x},{y} is outside the {w}x{h} feature grid")
    heat = correlation_slice(P, y, x)
    fio.write_pfm(args.out, heat)
    iy, ix = divmod(int(heat.argmax()), w)
    print(f"peak {heat.max():.6g} at {ix},{iy}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="corrsfm", description="Two-view depth and pose from a correlation pyramid.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a seeded synthetic image pair")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, help="override scene.seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("solve", help="estimate depth and relative pose")
    s.add_argument("--target", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--intrinsics", required=True, help="full-resolution 'fx fy cx cy'")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("eval", help="depth and pose error metrics")
    s.add_argument("--pred-depth", required=True)
    s.add_argument("--gt-depth", required=True)
    s.add_argument("--pred-pose")
    s.add_argument("--gt-pose")
    s.add_argument("--align-scale", action="store_true", help="median-align the predicted depth first")
    s.add_argument("--csv", help="also write the metrics as one CSV record")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-corr", help="dump one target cell's level-0 correlation slice")
    s.add_argument("--target", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--at", required=True, help="target cell 'x,y' on the quarter-resolution grid")
    s.add_argument("--backend", default="census")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inspect_corr)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"corrsfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IllConditionedError as exc:
        print(f"corrsfm: ill-conditioned input: {exc}", file=sys.stderr)
        return EXIT_ILL_CONDITIONED
    except fio.FormatError as exc:
        print(f"corrsfm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"corrsfm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverError, SceneError, LossError, ValueError) as exc:
        print(f"corrsfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
