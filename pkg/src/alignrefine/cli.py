"""Command-line interface.

Usage: ``alignrefine <command> [CONFIG_FILE] [key=value ...] [--key value ...]``

Settings come from the command's defaults, then the optional key=value file
(``#`` starts a comment), then ``key=value`` arguments and ``--key`` flags
in the order given.  Unknown keys are rejected.  Exit codes: 0 ok, 2 config
error, 3 data error, 4 numeric failure; errors are a single stderr line
``alignrefine: error code=N kind=K msg="..."``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
_KINDS = {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_NUMERIC: "numeric"}


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# -- settings ----------------------------------------------------------------

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str) -> Optional[int]:
    if s.strip().lower() in ("none", "inf", "unbounded"):
        return None
    return int(s)


def _ms(s: str) -> float:
    v = s.strip().lower()
    if v.endswith("ms"):
        return float(v[:-2])
    if v.endswith("s"):
        return 1000.0 * float(v[:-1])
    return float(v)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str

    @property
    def is_bool(self) -> bool:
        return self.parse is _bool


def _k(name, parse, default, help):
    return Key(name, parse, default, help)


SEED = _k("seed", int, 0, "random seed (corpus sampling, initialization, batch order)")

TASK = [
    _k("vocab_size", int, 16, "number of non-blank labels"),
    _k("audio_dim", int, 16, "encoder feature dimension"),
    _k("min_labels", int, 4, "shortest reference"),
    _k("max_labels", int, 12, "longest reference"),
    _k("max_duration", int, 4, "most frames one label can occupy"),
    _k("noise", float, 0.5, "std of the Gaussian feature noise"),
    _k("successors", int, 3, "allowed successors per label in the bigram chain"),
    _k("emit", str, "first", "frame of its segment at which a label is emitted (first or last)"),
    _k("task_seed", int, 1234, "seed of the label embeddings and bigram chain"),
]
CORRUPT = [
    _k("substitution", float, 0.1, "first-pass substitution rate per label"),
    _k("deletion", float, 0.05, "first-pass deletion rate per label"),
    _k("insertion", float, 0.05, "first-pass insertion rate per label"),
    _k("corrupt_seed", _opt_int, None, "seed of the first-pass simulator (none: seed + 1)"),
]
ARCH = [
    _k("layers", int, 4, "decoder layers L"),
    _k("right", int, 2, "right context C per layer (positions for text, frames for audio)"),
    _k("audio_sa", _bool, True, "audio self-attention in the decoder"),
    _k("bottom_audio_sa", _bool, True, "audio self-attention also in the first layer"),
    _k("frame_ms", _ms, 60.0, "encoder frame size (60, 60ms or 0.06s)"),
]
MODEL = ARCH + [
    _k("model_dim", int, 64, "model width d"),
    _k("heads", int, 4, "attention heads"),
    _k("ffn_dim", _opt_int, None, "feed-forward width (none: 4 * model_dim)"),
    _k("text_left", _opt_int, None, "text self-attention left context (none: unbounded)"),
    _k("cross_left", _opt_int, 2, "cross-attention left context in frames (none: unbounded)"),
    _k("audio_left", _opt_int, None, "audio self-attention left context (none: unbounded)"),
    _k("max_len", int, 128, "longest alignment the position table covers"),
]
TRAIN = [
    _k("batch_size", int, 32, "utterances per update"),
    _k("lr", float, 2e-3, "peak learning rate"),
    _k("warmup", int, 200, "linear warmup updates before inverse square-root decay"),
    _k("max_steps", int, 2000, "optimizer updates"),
    _k("steps", int, 3, "refinement steps S"),
    _k("clip", float, 1.0, "gradient norm clip"),
    _k("eval_every", int, 500, "updates between evaluations (0: never)"),
]
MWER = [
    _k("beam", int, 4, "MWER hypotheses K per utterance"),
    _k("mwer_steps", int, 1, "refinement steps S' inside the MWER objective"),
    _k("gamma", float, 0.005, "weight of the MLE term in the composite objective"),
]


def _io(name, help, default=""):
    return _k(name, str, default, help)


COMMANDS: dict[str, tuple[str, list[Key]]] = {
    "gen-data": ("write a synthetic corpus", [
        _io("out", "output corpus directory"), _k("n", int, 1000, "number of utterances"),
        _io("prefix", "utterance id prefix", "utt"), SEED] + TASK + CORRUPT),
    "train": ("MLE training of the refinement decoder", [
        _io("data", "training corpus directory"), _io("eval_data", "evaluation corpus directory"),
        _io("out", "checkpoint path prefix"), _io("log", "metrics JSON-lines file"),
        _k("resume", _bool, False, "continue from the training state at 'out'"),
        _k("checkpoint_every", int, 0, "updates between resumable checkpoints (0: end only)"),
        SEED] + MODEL + TRAIN),
    "finetune-mwer": ("MWER finetuning of a trained checkpoint", [
        _io("checkpoint", "input checkpoint"), _io("data", "training corpus directory"),
        _io("eval_data", "evaluation corpus directory"), _io("out", "output checkpoint"),
        _io("log", "metrics JSON-lines file"),
        _k("monitor", int, 500, "training utterances used to track the expected-NWE term"),
        _k("batch_size", int, 32, "utterances per update"),
        _k("lr", float, 1e-4, "constant learning rate"),
        _k("max_steps", int, 200, "optimizer updates"),
        _k("steps", int, 3, "refinement steps used for evaluation"),
        _k("clip", float, 1.0, "gradient norm clip"),
        _k("eval_every", int, 0, "updates between evaluations (0: end only)"),
        SEED] + MWER),
    "eval": ("per-step WER of a checkpoint", [
        _io("checkpoint", "checkpoint to evaluate"), _io("data", "corpus directory"),
        _k("steps", int, 3, "refinement steps"), _k("batch_size", int, 64, "decoding batch size"),
        _io("hyps", "write final hypotheses here"), SEED]),
    "delay-report": ("streaming delay of a decoder configuration", [
        _k("audio_sa", _bool, False, "audio self-attention in the decoder") if k.name == "audio_sa" else k
        for k in ARCH] + [
        _k("steps", int, 1, "refinement steps S"), SEED]),
    "masks-dump": ("ASCII attention masks of one alignment", [
        _io("input", "alignment file (as written by gen-data)"),
        _k("index", int, 0, "which alignment of 'input'"),
        _io("tokens", "inline alignment tokens, e.g. '0 1 0 0 0 2 3 0'"),
        _k("audio_len", _opt_int, None, "frames of an inline alignment (none: number of blanks)"),
        _k("right", int, 2, "right context C"),
        _k("text_left", _opt_int, None, "text self-attention left context"),
        _k("cross_left", _opt_int, 2, "cross-attention left context"),
        _k("audio_left", _opt_int, None, "audio self-attention left context"), SEED]),
    "rtf-bench": ("single-thread real-time factor of refinement", [
        _io("checkpoint", "checkpoint to time (empty: fresh model from the model keys)"),
        _k("n", int, 50, "utterances"), _k("steps", int, 3, "refinement steps"),
        _k("threads", int, 1, "torch intra-op threads"), SEED] + MODEL + TASK),
    "selftest": ("oracle and invariant checks", [
        _k("full", _bool, False, "run the full-size checks"), SEED]),
}

ALIASES = {"L": "layers", "C": "right", "f": "frame_ms", "S": "steps", "K": "beam",
           "audio-sa": "audio_sa", "frame-ms": "frame_ms"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="alignrefine", description=__doc__.split("\n\n")[0],
                formatter_class=argparse.RawDescriptionHelpFormatter,
                epilog="Run 'alignrefine <command> --help' for the keys of a command.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (desc, keys) in COMMANDS.items():
        sp = sub.add_parser(name, help=desc, description=desc,
                            epilog="Every --key flag may also be given as key=value "
                                   "(aliases: L, C, f, S, K).")
        sp.add_argument("settings", nargs="*", metavar="FILE|key=value",
                        help="config file of key=value lines, or single overrides")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")
        for k in keys:
            flag = "--" + k.name.replace("_", "-")
            text = f"{k.help} (default: {k.default if k.default is not None else 'none'})"
            if k.is_bool:
                sp.add_argument(flag, dest=k.name, action=argparse.BooleanOptionalAction,
                                default=None, help=text)
            else:
                sp.add_argument(flag, dest=k.name, default=None, metavar="V", help=text)
    return p


def _assign(values: dict, keys: dict[str, Key], key: str, raw: str, origin: str) -> None:
    key = ALIASES.get(key, key).replace("-", "_")
    if key not in keys:
        raise CliError(EXIT_CONFIG, f"unknown key '{key}' ({origin})")
    try:
        values[key] = keys[key].parse(raw)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"bad value for '{key}' ({origin}): {exc}") from None


def parse_config_text(text: str, keys: dict[str, Key], values: dict, origin: str) -> None:
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"expected key=value at {origin}:{ln}")
        k, v = line.split("=", 1)
        _assign(values, keys, k.strip(), v.strip(), f"{origin}:{ln}")


def resolve(command: str, ns: argparse.Namespace, argv_order: Sequence[str]) -> dict:
    """Merge defaults, config file, key=value arguments and flags."""
    keys = {k.name: k for k in COMMANDS[command][1]}
    values = {k.name: k.default for k in keys.values()}
    for item in ns.settings:
        if "=" in item:
            continue
        path = Path(item)
        if not path.is_file():
            raise CliError(EXIT_CONFIG, f"config file not found: {item}")
        parse_config_text(path.read_text(), keys, values, item)
    for item in ns.settings:
        if "=" in item:
            k, v = item.split("=", 1)
            _assign(values, keys, k.strip(), v.strip(), "argument")
    for name, k in keys.items():
        v = getattr(ns, name, None)
        if v is None:
            continue
        if k.is_bool:
            values[name] = v
        else:
            _assign(values, keys, name, v, f"--{name.replace('_', '-')}")
    return values


def _require(values: dict, *names: str) -> None:
    for n in names:
        if not values.get(n):
            raise CliError(EXIT_CONFIG, f"missing required key '{n}'")


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _load_data(path: str):
    from .synth import load_corpus
    try:
        return load_corpus(path)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_DATA, f"cannot read corpus '{path}': {exc}") from None


def _load_model(path: str):
    from .model import load_checkpoint
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_DATA, f"cannot read checkpoint '{path}': {exc}") from None


def _task_config(v: dict):
    from .synth import TaskConfig
    return TaskConfig(**{k.name: v[k.name] for k in TASK})


def _decoder_config(v: dict, vocab_size: int, audio_dim: int, steps: int = 1):
    from .model import DecoderConfig
    return DecoderConfig(
        vocab_size=vocab_size, audio_dim=audio_dim, model_dim=v["model_dim"], heads=v["heads"],
        ffn_dim=v["ffn_dim"], layers=v["layers"], right_context=v["right"],
        text_left=v["text_left"], cross_left=v["cross_left"], audio_left=v["audio_left"],
        audio_self_attention=v["audio_sa"], bottom_audio_sa=v["bottom_audio_sa"],
        steps=steps, frame_size=v["frame_ms"] / 1000.0, max_len=v["max_len"])


def _check_lengths(corpus, max_len: int, origin: str) -> None:
    longest = max((len(u.first_pass) for u in corpus if u.first_pass is not None), default=0)
    if longest > max_len:
        raise CliError(EXIT_CONFIG, f"{origin} has an alignment of {longest} > max_len={max_len}")
    if any(u.first_pass is None for u in corpus):
        raise CliError(EXIT_DATA, f"{origin} has no first-pass alignments")


# -- commands ----------------------------------------------------------------

def cmd_gen_data(v: dict) -> None:
    from .synth import CorruptionConfig, first_pass_wer, generate, save_corpus
    _require(v, "out")
    task = _task_config(v)
    cseed = v["corrupt_seed"] if v["corrupt_seed"] is not None else v["seed"] + 1
    corr = CorruptionConfig(v["substitution"], v["deletion"], v["insertion"], cseed)
    corpus = generate(v["n"], task, v["seed"], corr, prefix=v["prefix"])
    save_corpus(corpus, v["out"], task)
    _emit({"command": "gen-data", "out": v["out"], "utterances": len(corpus),
           "first_pass_wer": round(first_pass_wer(corpus), 6) if corpus else None})


def cmd_train(v: dict) -> None:
    from .model import init_params
    from .train import MetricsLog, TrainConfig, evaluate, load_training_state, save_training_state, train_mle
    _require(v, "data", "out")
    corpus, task = _load_data(v["data"])
    eval_corpus = _load_data(v["eval_data"])[0] if v["eval_data"] else None
    tcfg = TrainConfig(batch_size=v["batch_size"], lr=v["lr"], warmup=v["warmup"],
                       max_steps=v["max_steps"], steps=v["steps"], clip=v["clip"],
                       eval_every=v["eval_every"], seed=v["seed"])
    dcfg = _decoder_config(v, task.vocab_size, task.audio_dim, v["steps"])
    _check_lengths(corpus, dcfg.max_len, v["data"])
    if eval_corpus is not None:
        _check_lengths(eval_corpus, dcfg.max_len, v["eval_data"])
    start, opt = 0, None
    if v["resume"] and Path(v["out"] + ".json").exists():
        try:
            model, opt, start = load_training_state(v["out"], tcfg)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(EXIT_DATA, f"cannot resume from '{v['out']}': {exc}") from None
    else:
        model = init_params(dcfg, v["seed"])
        if v["log"]:
            Path(v["log"]).write_text("")
    metrics = MetricsLog(v["log"] or None)
    model, opt, metrics = train_mle(corpus, tcfg, model, eval_corpus, metrics, start, opt,
                                    v["checkpoint_every"], v["out"])
    save_training_state(v["out"], model, opt, tcfg.max_steps)
    out = {"command": "train", "checkpoint": v["out"], "updates": tcfg.max_steps}
    if eval_corpus is not None:
        out["wer"] = evaluate(model, eval_corpus, tcfg.steps)
    _emit(out)


def cmd_finetune_mwer(v: dict) -> None:
    from .model import save_checkpoint
    from .train import MetricsLog, MwerConfig, TrainConfig, finetune_mwer
    _require(v, "checkpoint", "data", "out")
    model = _load_model(v["checkpoint"])
    corpus, _ = _load_data(v["data"])
    eval_corpus = _load_data(v["eval_data"])[0] if v["eval_data"] else None
    _check_lengths(corpus, model.cfg.max_len, v["data"])
    tcfg = TrainConfig(batch_size=v["batch_size"], lr=v["lr"], warmup=0, max_steps=v["max_steps"],
                       steps=v["steps"], clip=v["clip"], eval_every=v["eval_every"], seed=v["seed"],
                       mwer=MwerConfig(v["beam"], v["mwer_steps"], v["gamma"]))
    if v["log"]:
        Path(v["log"]).write_text("")
    monitor = corpus[: v["monitor"]] if v["monitor"] else None
    model, metrics = finetune_mwer(model, corpus, tcfg, eval_corpus, monitor, MetricsLog(v["log"] or None))
    save_checkpoint(model, v["out"], extra={"mwer_updates": tcfg.max_steps})
    nwe = [r["expected_nwe"] for r in metrics.records if "expected_nwe" in r]
    out = {"command": "finetune-mwer", "checkpoint": v["out"]}
    if nwe:
        out["expected_nwe"] = {"before": nwe[0], "after": nwe[-1]}
    wer = [r["wer"] for r in metrics.records if "wer" in r]
    if wer:
        out["wer"] = wer[-1]
    _emit(out)


def cmd_eval(v: dict) -> None:
    from .train import decode, evaluate
    _require(v, "checkpoint", "data")
    if v["steps"] < 0:
        raise CliError(EXIT_CONFIG, "steps must be >= 0")
    model = _load_model(v["checkpoint"])
    corpus, _ = _load_data(v["data"])
    _check_lengths(corpus, model.cfg.max_len, v["data"])
    res = evaluate(model, corpus, v["steps"], v["batch_size"])
    if v["hyps"] and v["steps"]:
        final = decode(model, corpus, v["steps"], v["batch_size"])[-1]
        Path(v["hyps"]).write_text("".join(f"{u.id} {' '.join(map(str, h))}\n" for u, h in zip(corpus, final)))
    _emit({"command": "eval", "utterances": len(corpus), "first_pass_wer": res["first_pass"],
           "step_wer": res["steps"], "delay": _delay_numbers(model.cfg.delay_config(max(v["steps"], 1)))})


def _delay_numbers(dc) -> dict:
    from .masks import model_delay, receptive_bound, total_delay
    return {"effective_depth": dc.effective_depth, "receptive_frames": receptive_bound(dc),
            "per_step_s": round(model_delay(dc), 9), "total_s": round(total_delay(dc), 9)}


def cmd_delay_report(v: dict) -> None:
    from .masks import DelayConfig
    if v["steps"] < 1:
        raise CliError(EXIT_CONFIG, "steps must be >= 1")
    dc = DelayConfig(v["layers"], v["right"], v["frame_ms"] / 1000.0, v["audio_sa"], v["steps"],
                     v["bottom_audio_sa"])
    d = _delay_numbers(dc)
    print(f"layers={dc.layers} right={dc.right_per_layer} frame_ms={v['frame_ms']:g} "
          f"audio_sa={str(dc.audio_self_attention).lower()} steps={dc.steps} "
          f"effective_depth={d['effective_depth']} receptive_frames={d['receptive_frames']} "
          f"per_step_s={d['per_step_s']:.2f} total_s={d['total_s']:.2f}")


def cmd_masks_dump(v: dict) -> None:
    from .align import Alignment, read_alignments, timestamps
    from .masks import MaskSpec, band_self_mask, render_mask, time_aligned_cross_mask
    if bool(v["input"]) == bool(v["tokens"]):
        raise CliError(EXIT_CONFIG, "give exactly one of 'input' or 'tokens'")
    if v["tokens"]:
        try:
            toks = tuple(int(t) for t in v["tokens"].replace(",", " ").split())
        except ValueError:
            raise CliError(EXIT_CONFIG, f"bad tokens: {v['tokens']!r}") from None
        T = v["audio_len"] if v["audio_len"] is not None else sum(t == 0 for t in toks)
        a = Alignment(toks, T)
    else:
        try:
            aligns = read_alignments(v["input"])
            a = aligns[v["index"]]
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_DATA, f"cannot read alignments '{v['input']}': {exc}") from None
        except IndexError:
            raise CliError(EXIT_DATA, f"'{v['input']}' has {len(aligns)} alignments") from None
    ts = timestamps(a)
    C = v["right"]
    print(f"# tokens {' '.join(map(str, a.tokens))}")
    print(f"# timestamps {' '.join(map(str, ts.tolist()))}")
    print(f"# text self-attention ({len(a)}x{len(a)}, right={C})")
    print(render_mask(band_self_mask(len(a), MaskSpec(v["text_left"], C))))
    print(f"# cross-attention ({len(a)}x{a.audio_len}, right={C})")
    print(render_mask(time_aligned_cross_mask(ts, a.audio_len, MaskSpec(v["cross_left"], C))))
    print(f"# audio self-attention ({a.audio_len}x{a.audio_len}, right={C})")
    print(render_mask(band_self_mask(a.audio_len, MaskSpec(v["audio_left"], C))))


def cmd_rtf_bench(v: dict) -> None:
    import torch
    from .model import init_params
    from .synth import CorruptionConfig, generate
    from .train import corpus_batch
    from .model import refine_batch
    if v["threads"] < 1 or v["n"] < 1 or v["steps"] < 1:
        raise CliError(EXIT_CONFIG, "threads, n and steps must be >= 1")
    torch.set_num_threads(v["threads"])
    task = _task_config(v)
    if v["checkpoint"]:
        model = _load_model(v["checkpoint"])
        if (model.cfg.vocab_size, model.cfg.audio_dim) != (task.vocab_size, task.audio_dim):
            raise CliError(EXIT_CONFIG, "checkpoint vocab_size/audio_dim differ from the task keys")
    else:
        model = init_params(_decoder_config(v, task.vocab_size, task.audio_dim, v["steps"]), v["seed"])
    corpus = generate(v["n"], task, v["seed"], CorruptionConfig(seed=v["seed"] + 1), prefix="rtf")
    _check_lengths(corpus, model.cfg.max_len, "benchmark corpus")
    model.eval()
    compute, audio = 0.0, 0.0
    with torch.no_grad():
        for u in corpus:
            batch = corpus_batch([u], model)
            t0 = time.perf_counter()
            refine_batch(model, batch, v["steps"])
            compute += time.perf_counter() - t0
            audio += u.audio_len * model.cfg.frame_size
    print(f"utterances={len(corpus)} steps={v['steps']} threads={v['threads']} "
          f"audio_s={audio:.3f} compute_s={compute:.3f} rtf={compute / audio:.4f} "
          f"rtf_per_step={compute / audio / v['steps']:.4f}")


def cmd_selftest(v: dict) -> None:
    import torch
    from .checks import selftest
    torch.manual_seed(v["seed"])
    results = selftest(quick=not v["full"])
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"selftest {len(results) - len(failed)}/{len(results)} passed")
    if failed:
        raise CliError(EXIT_NUMERIC, f"selftest failed: {', '.join(failed)}")


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "finetune-mwer": cmd_finetune_mwer,
            "eval": cmd_eval, "delay-report": cmd_delay_report, "masks-dump": cmd_masks_dump,
            "rtf-bench": cmd_rtf_bench, "selftest": cmd_selftest}


def _fail(code: int, msg: str) -> int:
    msg = " ".join(str(msg).split()).replace('"', "'")
    print(f'alignrefine: error code={code} kind={_KINDS[code]} msg="{msg}"', file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .align import InvalidInput
    from .train import NumericalFailure
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = build_parser().parse_args(argv)
        values = resolve(ns.command, ns, argv)
        logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        try:
            HANDLERS[ns.command](values)
        except InvalidInput as exc:
            raise CliError(EXIT_DATA, str(exc)) from None
        except NumericalFailure as exc:
            raise CliError(EXIT_NUMERIC, str(exc)) from None
        except FloatingPointError as exc:
            raise CliError(EXIT_NUMERIC, str(exc)) from None
        except ValueError as exc:  # dataclass validation of a resolved setting
            raise CliError(EXIT_CONFIG, str(exc)) from None
    except CliError as exc:
        return _fail(exc.code, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
