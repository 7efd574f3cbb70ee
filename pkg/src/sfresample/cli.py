"""Command-line entry point: ``sfresample {resample,kernel,train,experiment}``.

Every command is deterministic given ``--seed``. Outputs are written to a
temporary name and moved into place only after the command succeeds; on any
error nothing is left behind and the exit code is nonzero.

Config files (``--config``) are JSON objects whose keys mirror the experiment
configuration; command-line flags override values read from the file.
"""

import argparse
import contextlib
import dataclasses
import json
import math
import os
import sys

from sfresample import analysis, kernels, proxy, resampler, trainable, wavio

DEFAULT_SIGMA = resampler.DEFAULT_KERNEL_SIGMA
METHODS = [m.value for m in resampler.Method]


class CliError(Exception):
    pass


class _Outputs:
    """Collects output files; commits them together or not at all."""

    def __init__(self):
        self.pending = []

    def path(self, final):
        tmp = f"{final}.partial-{os.getpid()}"
        self.pending.append((tmp, final))
        return tmp

    def write_text(self, final, text):
        with open(self.path(final), "w", newline="\n") as fh:
            fh.write(text)

    def commit(self):
        for tmp, final in self.pending:
            os.replace(tmp, final)
        self.pending = []

    def discard(self):
        for tmp, _ in self.pending:
            with contextlib.suppress(FileNotFoundError):
                os.remove(tmp)
        self.pending = []


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _method(text):
    try:
        return resampler.Method.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _kernel_args(p):
    p.add_argument("--window-length", type=_positive_int, default=48,
                   help="kernel support L in input samples (default: 48)")
    p.add_argument("--kaiser-alpha", type=float, default=4.1,
                   help="Kaiser window shape alpha (default: 4.1)")


def _noise_args(p):
    p.add_argument("--snr-db", type=float, default=None,
                   help="post_noise SNR in dB (default: 20)")
    p.add_argument("--sigma", type=float, default=None,
                   help="noisy_kernel tap-noise standard deviation "
                        f"(default: {DEFAULT_SIGMA:g}, i.e. variance 1e-6)")
    p.add_argument("--params", help="kernel network JSON (required for --method trainable)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sfresample",
        description="Sampling-frequency conversion with conventional, post-noise, "
                    "noisy-kernel and trainable windowed-sinc kernels.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("resample", help="resample a WAV file")
    p.add_argument("input", help="input WAV (PCM16, PCM24 or float32)")
    p.add_argument("output", help="output WAV")
    p.add_argument("--rate", type=_positive_int, required=True, help="target rate in Hz")
    p.add_argument("--method", type=_method, default=resampler.Method.CONVENTIONAL,
                   help=f"one of {', '.join(METHODS)} (default: conventional)")
    _noise_args(p)
    _kernel_args(p)
    p.add_argument("--seed", type=int, default=0, help="noise seed (default: 0)")
    p.add_argument("--format", choices=wavio.FORMATS, default=None,
                   help="output sample format (default: same as input)")

    p = sub.add_parser("kernel", help="export a kernel table and its frequency response")
    p.add_argument("--rate-in", type=_positive_int, required=True, help="input rate in Hz")
    p.add_argument("--rate-out", type=_positive_int, required=True, help="output rate in Hz")
    p.add_argument("--method", type=_method, default=resampler.Method.CONVENTIONAL,
                   help="conventional, noisy_kernel or trainable (default: conventional)")
    _noise_args(p)
    _kernel_args(p)
    p.add_argument("--seed", type=int, default=0, help="noise seed (default: 0)")
    p.add_argument("--n-fft", type=_positive_int, default=None,
                   help="DFT size, a power of two >= total tap count (default: the "
                        "smallest such power of two)")
    p.add_argument("--out-csv", help="frequency response CSV (freq_hz, magnitude_db)")
    p.add_argument("--out-json", help="kernel table JSON")

    for name, text in (("train", "train the kernel network through the proxy separator"),
                       ("experiment", "run the proxy separation experiment")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=None, help="root seed (default: 0)")
        p.add_argument("--rate-in", type=_positive_int, default=None,
                       help="input rate in Hz (default: 8000)")
        p.add_argument("--trained-rate", type=_positive_int, default=None,
                       help="separator rate in Hz (default: 44100)")
        p.add_argument("--max-epochs", type=_positive_int, default=None,
                       help="training epoch limit (default: 100 for train, 30 for experiment)")
        p.add_argument("--learning-rate", type=float, default=None,
                       help="initial Adam step size, decayed by 0.98 every 2 epochs "
                            "(default: 1e-3)")
        p.add_argument("--batch-size", type=_positive_int, default=None,
                       help="items per update (default: 4)")
        p.add_argument("--patience", type=_positive_int, default=None,
                       help="early-stop patience in epochs (default: 10)")
        p.add_argument("--warm-start-steps", type=int, default=None,
                       help="least-squares fit steps toward the windowed sinc before "
                            "training (default: 2000)")
        if name == "train":
            p.add_argument("--regularizer-only", action="store_true", default=None,
                           help="identity separator; only the resampling term drives the fit")
            p.add_argument("--out-params", help="kernel network JSON")
            p.add_argument("--out-record", help="per-epoch record CSV")
        else:
            p.add_argument("--methods", nargs="*", default=None,
                           help=f"subset of {', '.join(METHODS)} (default: all)")
            p.add_argument("--snr-db", type=float, default=None,
                           help="post_noise SNR in dB (default: 20)")
            p.add_argument("--sigma", type=float, default=None,
                           help="noisy_kernel tap-noise std (default: 1e-3, variance 1e-6)")
            p.add_argument("--params", help="trained kernel JSON; skips training")
            p.add_argument("--out-csv", help="SDR table CSV")
    return parser


def _spec_from_args(args):
    cfg = kernels.KernelConfig(args.window_length, args.kaiser_alpha)
    params = None
    if args.method is resampler.Method.TRAINABLE:
        if not args.params:
            raise CliError("--method trainable needs --params")
        params = _load_params(args.params)
    snr = args.snr_db
    sigma = args.sigma
    if args.method is not resampler.Method.POST_NOISE and snr is not None:
        raise CliError("--snr-db only applies to post_noise")
    if args.method is not resampler.Method.NOISY_KERNEL and sigma is not None:
        raise CliError("--sigma only applies to noisy_kernel")
    return resampler.ResampleSpec(args.method, cfg, snr_db=snr, kernel_sigma=sigma,
                                  seed=args.seed, kernel_params=params)


def _load_params(path):
    try:
        with open(path) as fh:
            return trainable.MLPKernelParams.from_json(fh.read())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot load kernel parameters from {path}: {exc}") from None


def _band_line(sig):
    nyq = sig.rate_hz / 2.0
    edges = [0.0, min(4000.0, nyq)]
    if nyq > 4000.0:
        edges.append(nyq)
    rep = analysis.spectral_report(sig, edges)
    return ", ".join(f"[{lo:g}, {hi:g}) Hz: {e:.6e} ({db:.2f} dB)"
                     for (lo, hi), e, db in zip(rep.band_edges_hz, rep.band_energy,
                                                rep.band_energy_db))


def cmd_resample(args, out):
    spec = _spec_from_args(args)
    try:
        x, kind = wavio.read_wav(args.input)
    except OSError as exc:
        raise CliError(f"cannot read {args.input}: {exc.strerror or exc}") from None
    y = resampler.resample(x, args.rate, spec)
    wavio.write_wav(out.path(args.output), y, args.format or kind)
    print(f"N={len(x)} M={len(y)} rate {x.rate_hz} -> {y.rate_hz} Hz method={spec.method.value}")
    print(f"input band energy: {_band_line(x)}")
    print(f"output band energy: {_band_line(y)}")


def cmd_kernel(args, out):
    spec = _spec_from_args(args)
    if spec.method is resampler.Method.POST_NOISE:
        raise CliError("post_noise perturbs the signal, not the kernel")
    if spec.method is resampler.Method.TRAINABLE:
        table = trainable.export_kernel(spec.kernel_params, args.rate_in, args.rate_out)
    else:
        table = kernels.discretize_kernel(spec.kernel_cfg, args.rate_in, args.rate_out)
        if spec.method is resampler.Method.NOISY_KERNEL:
            table = kernels.add_kernel_noise(table, spec.kernel_sigma, spec.seed)
    resp = kernels.kernel_frequency_response(table, args.n_fft)
    if args.out_json:
        out.write_text(args.out_json, table.to_json())
    if args.out_csv:
        out.write_text(args.out_csv, analysis.response_comparison_csv(
            resp.freqs_hz, {"magnitude": resp.magnitude_db}))
    nyq = min(args.rate_in, args.rate_out) / 2.0
    pass_db = 20 * math.log10(max(kernels.band_mean_magnitude(resp, 0.0, 0.875 * nyq), 1e-10))
    stop_hi = args.rate_out / 2.0
    line = (f"phases={table.phases} taps_per_phase={table.taps_per_phase} n_fft={resp.n_fft} "
            f"passband mean {pass_db:.2f} dB")
    if stop_hi > 1.5 * nyq:
        stop = kernels.band_mean_magnitude(resp, 1.5 * nyq, stop_hi)
        line += f", stopband mean {20 * math.log10(max(stop, 1e-10)):.2f} dB"
    print(line)


def _experiment_config(args, defaults=None):
    doc = dict(defaults or {})
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise CliError("config must be a JSON object")
        train = {**doc.get("train", {}), **loaded.pop("train", {})}
        doc.update(loaded)
        doc["train"] = train
    flags = {"seed": args.seed, "input_rate_hz": args.rate_in,
             "trained_rate_hz": args.trained_rate, "warm_start_steps": args.warm_start_steps}
    for key in ("regularizer_only", "methods", "snr_db"):
        if getattr(args, key, None) is not None:
            flags[key] = getattr(args, key)
    if getattr(args, "sigma", None) is not None:
        flags["kernel_sigma"] = args.sigma
    doc.update({k: v for k, v in flags.items() if v is not None})
    train_flags = {"max_epochs": args.max_epochs, "learning_rate": args.learning_rate,
                   "batch_size": args.batch_size, "early_stop_patience": args.patience}
    train = dict(doc.get("train", {}))
    train.update({k: v for k, v in train_flags.items() if v is not None})
    if "seed" not in train:
        train["seed"] = doc.get("seed", 0)
    doc["train"] = train
    try:
        return proxy.ExperimentConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from None


def _epoch_logger(record):
    print(f"epoch {record.epoch:3d} train {record.train_loss:.6g} val {record.val_loss:.6g} "
          f"sep {record.sep_term:.6g} reg {record.reg_term:.6g} lr {record.lr:.3g}",
          file=sys.stderr)


def cmd_train(args, out):
    config = _experiment_config(args, {"train": {"max_epochs": 100}})
    theta, record = proxy.train_for_config(config, log=_epoch_logger)
    if args.out_params:
        out.write_text(args.out_params, theta.to_json(
            seed=config.seed, train_config=dataclasses.asdict(config.train)))
    if args.out_record:
        out.write_text(args.out_record, record.to_csv())
    best = record.epochs[record.best_epoch]
    print(f"best validation loss {best.val_loss:.6g} at epoch {best.epoch} "
          f"(sep {best.sep_term:.6g}, reg {best.reg_term:.6g}); "
          f"{len(record.epochs)} epochs run")


def cmd_experiment(args, out):
    config = _experiment_config(args)
    if not config.methods:
        raise CliError("no methods to run")
    params = _load_params(args.params) if args.params else None
    reference, results = proxy.run_suite(config, kernel_params=params, log=_epoch_logger)
    if args.out_csv:
        out.write_text(args.out_csv, proxy.results_csv([reference, *results]))
    print(f"{'method':<14}{'mean SDR (dB)':>15}{'mean gate':>12}")
    for res in (reference, *results):
        print(f"{res.method:<14}{res.mean_sdr_db:>15.2f}{res.mean_gate:>12.4f}")


COMMANDS = {"resample": cmd_resample, "kernel": cmd_kernel, "train": cmd_train,
            "experiment": cmd_experiment}


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = _Outputs()
    try:
        COMMANDS[args.command](args, out)
        out.commit()
    except (CliError, ValueError, FloatingPointError, OSError) as exc:
        out.discard()
        print(f"sfresample {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        out.discard()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
