"""Command-line entry point.

Every command accepts ``--config FILE`` (flat ``key = value`` text),
``--set key=value`` overrides and ``--seed``. Failures exit nonzero and print
``error[<category>]: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from radario.calibration import nll, write_report, z_stats
from radario.config import Config
from radario.errors import ConfigError, FormatError, RadarioError
from radario.evaluation import evaluate, read_tum, write_tum
from radario.imu import read_imu_csv
from radario.pipeline import (calibration_samples, dsp_measurements, feed_measurements, read_velocity_csv,
                              run_odometry, write_clouds, write_dataset, write_velocity_csv)
from radario.spectrum import iter_frames
from radario.velocity import MODE_DIRECT, MODE_DOPPLER, feed_info

log = logging.getLogger("radario")

SOURCES = ("pc", "doppler", "velocity")


def _config(args) -> Config:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    return Config.load(args.config, overrides)


def cmd_sim_gen(args, cfg: Config) -> int:
    paths = write_dataset(cfg, args.out, with_iq=not args.no_iq)
    (Path(args.out) / "config.txt").write_text(cfg.to_text())
    for name, path in paths.items():
        print(f"{name} = {path}")
    return 0


def cmd_dsp_run(args, cfg: Config) -> int:
    clouds = [] if args.clouds else None
    frames = iter_frames(args.iq, cfg.chirp())
    n = write_velocity_csv(args.out, dsp_measurements(frames, cfg, clouds))
    if clouds is not None:
        write_clouds(args.clouds, clouds)
    print(f"velocities = {n}")
    return 0


def _measurements(args, cfg: Config):
    path = args.input
    if args.source == "pc":
        if str(path).endswith(".riq"):
            return list(dsp_measurements(iter_frames(path, cfg.chirp()), cfg))
        return read_velocity_csv(path)
    mode, _ = feed_info(path)
    want = MODE_DOPPLER if args.source == "doppler" else MODE_DIRECT
    if mode != want:
        raise FormatError(f"source {args.source!r} needs an RPV feed in mode {want}, file has mode {mode}")
    return list(feed_measurements(path, cfg))


def cmd_rio_run(args, cfg: Config) -> int:
    imu = read_imu_csv(args.imu)
    t0 = time.perf_counter()
    traj = run_odometry(imu, _measurements(args, cfg), cfg)
    write_tum(args.out, traj)
    log.info("%d poses in %.1f s", len(traj), time.perf_counter() - t0)
    print(f"poses = {len(traj)}")
    return 0


def cmd_eval(args, cfg: Config) -> int:
    report = evaluate(read_tum(args.est), read_tum(args.gt), args.interval, args.max_dt)
    values = report.as_dict()
    if args.out:
        write_report(args.out, values)
    for k, v in values.items():
        print(f"{k} = {v}")
    return 0


def cmd_calib_check(args, cfg: Config) -> int:
    est, gt, lv = calibration_samples(args.source, args.truth, cfg)
    clamp = (cfg.logvar_min, cfg.logvar_max)
    value = nll(est, gt, lv, clamp, squared=not args.unsquared)
    sigma = np.exp(0.5 * np.clip(lv, *clamp))
    values = z_stats(est - gt, sigma, value).as_dict()
    if args.out:
        write_report(args.out, values)
    for k, v in values.items():
        print(f"{k} = {v}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="seed for every random draw")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="radario", description="Radar-inertial odometry toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim-gen", parents=[common], help="simulate IQ frames, IMU, feeds and truth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-iq", action="store_true", help="skip the (large) raw IQ file")
    p.set_defaults(func=cmd_sim_gen)

    p = sub.add_parser("dsp-run", parents=[common], help="IQ frames to point clouds and velocities")
    p.add_argument("--iq", required=True, help="RIQ1 frame file")
    p.add_argument("--out", required=True, help="velocity CSV")
    p.add_argument("--clouds", help="optional point-cloud CSV")
    p.set_defaults(func=cmd_dsp_run)

    p = sub.add_parser("rio-run", parents=[common], help="fuse IMU and radar velocities into a trajectory")
    p.add_argument("--source", choices=SOURCES, required=True)
    p.add_argument("--input", required=True,
                   help="pc: velocity CSV or RIQ1 file; doppler/velocity: RPV feed")
    p.add_argument("--imu", required=True, help="IMU CSV")
    p.add_argument("--out", required=True, help="TUM trajectory")
    p.set_defaults(func=cmd_rio_run)

    p = sub.add_parser("eval", parents=[common], help="APE / RPE of a TUM trajectory against ground truth")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--interval", type=float, default=10.0, help="RPE distance in meters")
    p.add_argument("--max-dt", type=float, default=0.05, help="timestamp association tolerance in seconds")
    p.add_argument("--out", help="key = value report file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calib-check", parents=[common], help="uncertainty calibration of a source")
    p.add_argument("--source", required=True, help="RPV feed or velocity CSV")
    p.add_argument("--truth", required=True, help="truth velocity CSV")
    p.add_argument("--unsquared", action="store_true", help="NLL with the unsquared residual")
    p.add_argument("--out", help="key = value report file")
    p.set_defaults(func=cmd_calib_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args, _config(args))
    except RadarioError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        category = "io" if isinstance(exc, OSError) else "invalid-input"
        print(f"error[{category}]: {exc}", file=sys.stderr)
        return 11 if isinstance(exc, OSError) else 12


if __name__ == "__main__":
    sys.exit(main())
