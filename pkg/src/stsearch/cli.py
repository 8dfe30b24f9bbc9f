"""Command-line driver: offline decoding, streaming, evaluation, MBR, fixtures, validation."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .core import DecodeError, ParseError, Vocabulary, load_lattice, save_lattice, validate_lattice
from .ctc import EndDetectConfig, ctc_greedy
from .ensemble import Candidate, MbrConfig, mbr_rank
from .metrics import corpus_al, corpus_bleu, average_lagging, read_event_log
from .scorers import TrieScorer, load_joint_scorer, load_trie_scorer
from .search import BeamConfig, label_sync_search, multi_decoder_search, time_sync_search
from .streaming import HoldN, LocalAgreement, StreamPolicy, run_stream
from .testkit import SyntheticSpec, generate_synthetic, random_planted_spec
from .transducer import TransducerConfig, transducer_search

DEFAULT_FRAME_MS = 40.0

DECODE_MODES = ("ctc-greedy", "joint-label", "joint-time", "multi-decoder",
                "transducer-greedy", "transducer-graves", "transducer-tsd", "transducer-alsd")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors, keeping 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _beam_config(args) -> BeamConfig:
    return BeamConfig(beam_size=args.beam, ctc_weight=args.ctc_weight, length_bonus=args.length_bonus,
                      max_len_ratio=args.max_len_ratio, nbest=min(args.nbest, args.beam),
                      length_normalize=args.length_normalize,
                      end_detect=EndDetectConfig(args.end_threshold, args.end_window))


def _transducer_config(args, variant: str) -> TransducerConfig:
    return TransducerConfig(beam_size=args.beam, variant=variant, n_step=args.n_step, u_cap=args.u_cap,
                            length_normalize=not args.no_length_normalize, nbest=min(args.nbest, args.beam))


def _emit_nbest(nbest, words, out) -> None:
    for rank, e in enumerate(nbest, 1):
        out.write(json.dumps({"rank": rank, "tokens": list(words(e.tokens)), "score": round(e.score, 10),
                              "delays": list(e.delays)}) + "\n")


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} --mode {args.mode} needs {', '.join(missing)}")


def _stage2_factory(path, vocab: Vocabulary):
    """Scorer per stage-1 output, from ``{"conditions": [{"tokens", "scorer"}], "fallback"}``."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict) or "fallback" not in obj:
        raise ParseError("stage-2 file needs a 'fallback' scorer")
    table = {}
    for i, cond in enumerate(obj.get("conditions", [])):
        if not isinstance(cond, dict) or "tokens" not in cond or "scorer" not in cond:
            raise ParseError(f"conditions[{i}] must have 'tokens' and 'scorer'")
        table[tuple(vocab.encode(cond["tokens"]))] = TrieScorer.from_json(cond["scorer"])
    fallback = TrieScorer.from_json(obj["fallback"])
    return lambda tokens: table.get(tuple(tokens), fallback)


def cmd_decode(args, out) -> int:
    mode = args.mode
    if mode.startswith("transducer-"):
        _require(args, "joint")
        joint = load_joint_scorer(args.joint)
        T = args.frames or joint.num_frames
        cfg = _transducer_config(args, mode.split("-", 1)[1])
        nbest = transducer_search(T, joint, cfg)
        _emit_nbest(nbest, joint.token_strings, out)
        return 0
    _require(args, "lattice")
    lattice = load_lattice(args.lattice)
    vocab = lattice.vocab
    if mode == "ctc-greedy":
        tokens = ctc_greedy(lattice)
        out.write(json.dumps({"rank": 1, "tokens": vocab.decode(tokens), "score": None, "delays": []}) + "\n")
        return 0
    _require(args, "scorer")
    scorer = load_trie_scorer(args.scorer)
    cfg = _beam_config(args)
    if mode == "joint-label":
        nbest = label_sync_search(lattice, scorer, cfg)
    elif mode == "joint-time":
        nbest = time_sync_search(lattice, scorer, cfg)
    else:
        _require(args, "stage2")
        lattice2 = load_lattice(args.stage2_lattice) if args.stage2_lattice else None
        vocab2 = lattice2.vocab if lattice2 else vocab
        first, nbest = multi_decoder_search((lattice, scorer, cfg), _stage2_factory(args.stage2, vocab2), cfg,
                                            lattice2)
        if args.stage1_out:
            with open(args.stage1_out, "w", encoding="utf-8") as fh:
                _emit_nbest(first, vocab.decode, fh)
        vocab = vocab2
    _emit_nbest(nbest, vocab.decode, out)
    return 0


def cmd_stream(args, out) -> int:
    rule = HoldN(args.n) if args.policy == "hold-n" else LocalAgreement(args.k)
    engine = args.engine.replace("-", "_")
    policy = StreamPolicy(engine, rule, args.block_size, EndDetectConfig(args.end_threshold, args.end_window),
                          keep_full_beam=not args.top1_only)
    if engine == "transducer_tsd":
        if args.joint is None:
            raise UsageError("stream --engine transducer-tsd needs --joint")
        joint = load_joint_scorer(args.joint)
        source = args.frames or joint.num_frames
        result, record, session = run_stream(source, joint, _transducer_config(args, "tsd"), policy,
                                             use_boundary=not args.no_boundary)
    else:
        if args.lattice is None or args.scorer is None:
            raise UsageError(f"stream --engine {args.engine} needs --lattice and --scorer")
        lattice = load_lattice(args.lattice)
        result, record, session = run_stream(lattice, load_trie_scorer(args.scorer), _beam_config(args), policy,
                                             use_boundary=not args.no_boundary)
    if args.events:
        session.export_events(args.events)
    al = average_lagging(record) if record.target_len else None
    out.write(json.dumps({"tokens": list(result.words), "delays": list(record.delays),
                          "source_len": record.source_len, "frames_consumed": session.frames_consumed,
                          "al_frames": al,
                          "al_seconds": None if al is None else al * args.frame_ms / 1000.0}) + "\n")
    if args.plot:
        from .report import plot_stream_events
        plot_stream_events(session.events, args.plot, title=f"{args.engine}, block {args.block_size}")
    return 0


def _read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_eval_bleu(args, out) -> int:
    rep = corpus_bleu(_read_lines(args.hyp), _read_lines(args.ref))
    sep = args.delimiter
    out.write(sep.join(["bleu", "p1", "p2", "p3", "p4", "bp", "hyp_len", "ref_len"]) + "\n")
    out.write(sep.join([f"{rep.bleu:.4f}", *(f"{p:.4f}" for p in rep.precisions),
                        f"{rep.brevity_penalty:.6f}", str(rep.hyp_len), str(rep.ref_len)]) + "\n")
    if args.plot:
        from .report import plot_bleu
        plot_bleu(rep, args.plot)
    return 0


def cmd_eval_al(args, out) -> int:
    records = [read_event_log(p) for p in args.events]
    sep = args.delimiter
    sec = args.frame_ms / 1000.0
    out.write(sep.join(["log", "source_len", "target_len", "al_frames", "al_seconds"]) + "\n")
    for path, rec in zip(args.events, records):
        al = average_lagging(rec)
        out.write(sep.join([str(path), str(rec.source_len), str(rec.target_len), f"{al:.4f}",
                            f"{al * sec:.4f}"]) + "\n")
    total = corpus_al(records)
    out.write(sep.join(["corpus", "", "", f"{total:.4f}", f"{total * sec:.4f}"]) + "\n")
    if args.plot:
        from .report import plot_latency
        plot_latency(records, args.plot, labels=[Path(p).stem for p in args.events], frame_ms=args.frame_ms)
    return 0


def _read_nbest(path, system: int) -> list[Candidate]:
    out = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(Candidate(tuple(obj["tokens"]), float(obj["score"]), system, len(out)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: not an n-best line ({exc})") from exc
    return out


def cmd_mbr(args, out) -> int:
    pool = [c for s, p in enumerate(args.nbest) for c in _read_nbest(p, s)]
    weighting = args.weighting.replace("-", "_")
    ranked = mbr_rank(pool, MbrConfig(weighting=weighting, temperature=args.temperature))
    for rank, r in enumerate(ranked, 1):
        c = r.candidate
        out.write(json.dumps({"rank": rank, "tokens": list(c.words), "utility": round(r.utility, 12),
                              "score": c.score, "system": c.system}) + "\n")
    return 0


def cmd_synth(args, out) -> int:
    extra = dict(frames_per_token=args.frames_per_token, noise_logp=args.noise, leading_blanks=args.leading_blanks,
                 trailing_blanks=args.trailing_blanks)
    if args.planted:
        spec = SyntheticSpec(args.vocab_size, tuple(int(x) for x in args.planted.split(",")), seed=args.seed, **extra)
    else:
        spec = random_planted_spec(args.seed, args.vocab_size, args.length, args.length, **extra)
    lattice, scorer, ref = generate_synthetic(spec)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_lattice(lattice, outdir / ("lattice.blat" if args.binary else "lattice.json"))
    scorer.save(outdir / "scorer.json")
    (outdir / "ref.txt").write_text(ref + "\n", encoding="utf-8")
    out.write(json.dumps({"frames": lattice.num_frames, "vocab_size": len(lattice.vocab),
                          "planted": list(spec.planted_sequence), "reference": ref}) + "\n")
    return 0


def cmd_validate(args, out) -> int:
    # violations are printed below, so silence the loader's own warning meanwhile
    logger = logging.getLogger("stsearch")
    level = logger.level
    logger.setLevel(logging.ERROR)
    try:
        report = validate_lattice(load_lattice(args.lattice))
    finally:
        logger.setLevel(level)
    if report.ok:
        out.write("ok\n")
        return 0
    for v in report.violations:
        out.write(f"violation: {v}\n")
    return 2


def _add_beam_flags(p):
    p.add_argument("--beam", type=int, default=4, help="beam size")
    p.add_argument("--ctc-weight", type=float, default=0.3, help="CTC interpolation weight in [0, 1]")
    p.add_argument("--length-bonus", type=float, default=0.0, help="score added per output token (nats)")
    p.add_argument("--max-len-ratio", type=float, default=1.0, help="maximum output length as a fraction of T")
    p.add_argument("--nbest", type=int, default=1, help="hypotheses to print (capped at --beam)")
    p.add_argument("--length-normalize", action="store_true", help="rank joint hypotheses by score per token")
    p.add_argument("--end-threshold", type=float, default=-10.0, help="end-detection score gap (nats)")
    p.add_argument("--end-window", type=int, default=3, help="end-detection window")
    p.add_argument("--n-step", type=int, default=3, help="transducer: max symbols per frame")
    p.add_argument("--u-cap", type=int, default=None, help="transducer: max output length (default T*n_step)")
    p.add_argument("--no-length-normalize", action="store_true", help="transducer: rank by raw log-probability")
    p.add_argument("--frames", type=int, default=None, help="transducer: source length (default from the table)")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="stsearch", description="Beam search, streaming and evaluation over serialized scores.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("decode", help="offline decoding; prints n-best JSON lines")
    p.add_argument("--mode", required=True, choices=DECODE_MODES)
    p.add_argument("--lattice", help="lattice file (.json text or .blat binary)")
    p.add_argument("--scorer", help="trie scorer JSON")
    p.add_argument("--joint", help="transducer joint table JSON")
    p.add_argument("--stage2", help="multi-decoder: stage-2 scorer table keyed by stage-1 tokens")
    p.add_argument("--stage2-lattice", help="multi-decoder: stage-2 lattice (default: the stage-1 lattice)")
    p.add_argument("--stage1-out", help="multi-decoder: write the stage-1 n-best here")
    _add_beam_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("stream", help="blockwise incremental decoding")
    p.add_argument("--engine", default="time-sync", choices=("label-sync", "time-sync", "transducer-tsd"))
    p.add_argument("--lattice")
    p.add_argument("--scorer")
    p.add_argument("--joint")
    p.add_argument("--block-size", type=int, default=40, help="frames per block")
    p.add_argument("--policy", default="hold-n", choices=("hold-n", "local-agreement"))
    p.add_argument("--n", type=int, default=0, help="hold-n: tokens withheld from the best hypothesis")
    p.add_argument("--k", type=int, default=2, help="local-agreement: block decodes that must agree")
    p.add_argument("--no-boundary", action="store_true", help="ignore end detection; read the whole source")
    p.add_argument("--top1-only", action="store_true", help="keep only the best hypothesis across blocks")
    p.add_argument("--events", help="write the READ/WRITE event log (JSON lines) here")
    p.add_argument("--frame-ms", type=float, default=DEFAULT_FRAME_MS, help="milliseconds per frame")
    p.add_argument("--plot", help="write a READ/WRITE timeline figure here")
    _add_beam_flags(p)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("eval-bleu", help="corpus BLEU (case-sensitive, whitespace tokens)")
    p.add_argument("--hyp", required=True, help="hypotheses, one per line")
    p.add_argument("--ref", required=True, help="references, one per line")
    p.add_argument("--delimiter", default="\t")
    p.add_argument("--plot", help="write an n-gram precision figure here")
    p.set_defaults(func=cmd_eval_bleu)

    p = sub.add_parser("eval-al", help="average lagging from streaming event logs")
    p.add_argument("--events", required=True, nargs="+", help="event logs, one per utterance")
    p.add_argument("--frame-ms", type=float, default=DEFAULT_FRAME_MS, help="milliseconds per frame")
    p.add_argument("--delimiter", default="\t")
    p.add_argument("--plot", help="write a delay-staircase figure here")
    p.set_defaults(func=cmd_eval_al)

    p = sub.add_parser("mbr", help="MBR ranking over pooled n-best JSON lines")
    p.add_argument("--nbest", required=True, nargs="+", help="n-best files, one per system")
    p.add_argument("--weighting", default="uniform", choices=("uniform", "score-softmax"))
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(func=cmd_mbr)

    p = sub.add_parser("synth", help="write a planted-sequence lattice, scorer and reference")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--vocab-size", type=int, default=12, help="total vocabulary size including specials")
    p.add_argument("--planted", help="comma-separated token ids (default: random from --seed)")
    p.add_argument("--length", type=int, default=6, help="random planted length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames-per-token", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.0, help="perturbation magnitude (nats)")
    p.add_argument("--leading-blanks", type=int, default=0)
    p.add_argument("--trailing-blanks", type=int, default=0)
    p.add_argument("--binary", action="store_true", help="write the lattice in binary form")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check lattice invariants; exit 2 on violations")
    p.add_argument("--lattice", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"stsearch: error: {exc}", file=sys.stderr)
        return 1
    except DecodeError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[IO]: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error[PARSE]: {exc}", file=sys.stderr)
        return 2


def run_cli(argv: Sequence[str] | None = None) -> int:
    try:
        return main(argv)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
