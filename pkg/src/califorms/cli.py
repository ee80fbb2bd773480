"""Command-line front end: struct analysis, trace simulation, line-format
conversion, and attack math.

Exit codes: 0 clean, 1 usage error (with a diagnostic on stderr), 2 when a
simulation logged security violations.  Output is byte-identical for
identical inputs, flags and seeds.
"""

from __future__ import annotations

import argparse
import json
import sys

from .analysis import (
    AttackParams,
    ScanObject,
    binomial_sigma,
    guess_success_probability,
    monte_carlo_scan,
    scan_detection_probability,
    scan_survival_probability,
)
from .cacheline import (
    CaliLine,
    decode_1B,
    decode_4B,
    decode_sentinel,
    encode_1B,
    encode_4B,
    encode_sentinel,
)
from .layout import LayoutError, Policy, caliform_layout, compute_layout, density_histogram
from .structdefs import StructParseError, load_struct_file
from .trace import EXIT_USAGE, TraceError, run_trace

_JSON_KWARGS = {"indent": 2, "sort_keys": True}


class _Parser(argparse.ArgumentParser):
    # usage errors are exit code 1; exit code 2 is reserved for violations
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(doc: dict) -> None:
    print(json.dumps(doc, **_JSON_KWARGS))


def _parse_hex_bytes(text: str, nbytes: int, what: str) -> bytes:
    text = text.removeprefix("0x")
    if len(text) != 2 * nbytes:
        raise ValueError(f"{what} must be {2 * nbytes} hex digits, got {len(text)}")
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise ValueError(f"{what} is not valid hex") from None


def _parse_hex_u64(text: str, what: str) -> int:
    try:
        value = int(text, 16)
    except ValueError:
        raise ValueError(f"{what} is not valid hex") from None
    if not 0 <= value < 1 << 64:
        raise ValueError(f"{what} does not fit in 64 bits")
    return value


# -- convert -------------------------------------------------------------------


def cmd_convert(args) -> int:
    data = _parse_hex_bytes(args.data, 64, "data")
    mask_bits = _parse_hex_u64(args.mask, "mask")
    line = CaliLine.from_security_offsets(
        data, [i for i in range(64) if (mask_bits >> i) & 1]
    )

    sentinel = encode_sentinel(line)
    chunked4 = encode_4B(line)
    chunked1 = encode_1B(line)
    expected = CaliLine(
        bytes(0 if line.mask[i] else data[i] for i in range(64)), line.mask
    )
    for decoded in (decode_sentinel(sentinel), decode_4B(chunked4), decode_1B(chunked1)):
        if decoded != expected:
            raise AssertionError("round-trip mismatch; this is a bug")

    doc = {
        "version": 1,
        "input": {"data": data.hex(), "mask": f"{mask_bits:016x}"},
        "bitvector8": {
            "mask": f"{mask_bits:016x}",
            "security_bytes": list(line.security_indices),
            "metadata_bits": CaliLine.METADATA_BITS,
        },
        "sentinel": {
            "califormed": sentinel.califormed,
            "payload": sentinel.payload.hex(),
            "metadata_bits": sentinel.METADATA_BITS,
        },
        "bitvector4": {
            "payload": chunked4.payload.hex(),
            "chunks": [
                {"califormed": m.califormed, "holder_index": m.holder_index}
                for m in chunked4.chunk_meta
            ],
            "metadata_bits": chunked4.METADATA_BITS,
        },
        "bitvector1": {
            "payload": chunked1.payload.hex(),
            "chunks": list(chunked1.chunk_meta),
            "metadata_bits": chunked1.METADATA_BITS,
        },
        "round_trip": "ok",
    }
    if args.format == "json":
        _emit(doc)
    else:
        print(f"input      data={data.hex()}")
        print(f"           mask={mask_bits:016x} "
              f"(security bytes: {list(line.security_indices)})")
        print(f"bitvector8 64 metadata bits/line; mask as above")
        print(f"sentinel   califormed={int(sentinel.califormed)} "
              f"payload={sentinel.payload.hex()}")
        chunks4 = " ".join(
            f"{c}:{m.holder_index}" if m.califormed else f"{c}:-"
            for c, m in enumerate(chunked4.chunk_meta)
        )
        print(f"bitvector4 chunks [{chunks4}] payload={chunked4.payload.hex()}")
        bits1 = "".join(str(int(b)) for b in chunked1.chunk_meta)
        print(f"bitvector1 chunks {bits1} payload={chunked1.payload.hex()}")
        print("round-trip OK (sentinel, bitvector4, bitvector1)")
    return 0


# -- analyze -------------------------------------------------------------------


def cmd_analyze(args) -> int:
    structs = load_struct_file(args.structs)
    policy = Policy.from_string(args.policy)
    rows = []
    layouts = []
    for name, fields in structs.items():
        layout = compute_layout(list(fields), name)
        layouts.append(layout)
        cl = caliform_layout(layout, policy, seed=args.seed,
                             min_pad=args.min, max_pad=args.max)
        rows.append((layout, cl))
    doc = {
        "version": 1,
        "policy": policy.value,
        "seed": args.seed,
        "min_pad": args.min,
        "max_pad": args.max,
        "structs": [
            {
                "name": layout.name,
                "total_size": layout.total_size,
                "density": layout.density,
                "padding_spans": [list(s) for s in layout.padding_spans],
                "fields": [
                    {
                        "name": f.name,
                        "kind": f.kind.value,
                        "size": f.size,
                        "alignment": f.alignment,
                        "offset": off,
                        "califormed_offset": coff,
                    }
                    for f, off, coff in zip(layout.fields, layout.offsets,
                                            cl.field_offsets)
                ],
                "califormed": cl.total_size,
                "security_spans": [list(s) for s in cl.security_spans],
                "overhead": cl.overhead,
            }
            for layout, cl in rows
        ],
        "histogram": density_histogram(layouts, args.bins),
    }
    if args.format == "json":
        _emit(doc)
    else:
        print(f"{'struct':<20} {'size':>5} {'density':>8} {'califormed':>10} "
              f"{'overhead':>8}  security spans")
        for layout, cl in rows:
            spans = ", ".join(f"({o},{n})" for o, n in cl.security_spans) or "-"
            print(f"{layout.name:<20} {layout.total_size:>5} "
                  f"{layout.density:>8.4f} {cl.total_size:>10} "
                  f"{cl.overhead:>8}  {spans}")
        hist = doc["histogram"]
        print(f"structs with padding: {hist['fraction_with_padding']:.1%} "
              f"of {hist['structs']}")
    return 0


# -- simulate ------------------------------------------------------------------


def cmd_simulate(args) -> int:
    structs = load_struct_file(args.structs) if args.structs else None
    with open(args.trace) as fh:
        lines = fh.readlines()
    result = run_trace(lines, structs=structs, strict=args.strict)
    _emit(result.stats)
    return result.exit_code


# -- attack --------------------------------------------------------------------


def cmd_attack(args) -> int:
    params = AttackParams(args.pn, args.objects)
    survival = scan_survival_probability(params)
    detection = scan_detection_probability(params)
    guess = guess_success_probability(args.spans, args.min, args.max)

    security_bytes = round(args.pn * args.object_size)
    obj = ScanObject(
        args.object_size,
        frozenset(range(args.object_size - security_bytes, args.object_size)),
    )
    empirical = monte_carlo_scan([obj] * args.objects, args.trials, args.seed)
    sigma = binomial_sigma(detection, args.trials)
    doc = {
        "version": 1,
        "params": {
            "security_fraction": args.pn,
            "objects": args.objects,
            "spans": args.spans,
            "span_min": args.min,
            "span_max": args.max,
            "object_size": args.object_size,
            "trials": args.trials,
            "seed": args.seed,
        },
        "closed_form": {
            "scan_survival": survival,
            "scan_detection": detection,
            "guess_success": guess,
        },
        "empirical": {"detection_rate": empirical, "trials": args.trials},
        "ci": {
            "sigma": sigma,
            "low": detection - 3 * sigma,
            "high": detection + 3 * sigma,
            "within_3_sigma": abs(empirical - detection) <= 3 * sigma,
        },
    }
    _emit(doc)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="califorms",
        description="Byte-granular memory-blacklisting simulator and analyzer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", parents=[], help="encode one 64-byte line in all formats")
    p.add_argument("data", help="64 data bytes as 128 hex digits")
    p.add_argument("mask", help="64-bit security mask as hex (bit i marks byte i)")
    p.add_argument("--format", choices=["json", "table"], default="table")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("analyze", help="lay out structs and insert security bytes")
    p.add_argument("structs", help="struct definitions (.json or C subset)")
    p.add_argument("--policy", default="opportunistic",
                   help="opportunistic | full | intelligent")
    p.add_argument("--min", type=int, default=1, help="minimum span length")
    p.add_argument("--max", type=int, default=7, help="maximum span length")
    p.add_argument("--seed", type=int, default=0, help="span length RNG seed")
    p.add_argument("--bins", type=int, default=10, help="density histogram bins")
    p.add_argument("--format", choices=["json", "table"], default="json")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="run a JSON-lines trace")
    p.add_argument("trace", help="trace file, one op per line")
    p.add_argument("--structs", help="struct definitions for malloc by type name")
    p.add_argument("--strict", action="store_true",
                   help="stop at the first violation")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", help="derandomization-attack probabilities")
    p.add_argument("--pn", type=float, required=True,
                   help="security-byte fraction per object (P/N)")
    p.add_argument("--objects", type=int, required=True, help="objects to scan (O)")
    p.add_argument("--spans", type=int, default=0, help="span widths to guess (n)")
    p.add_argument("--min", type=int, default=1, help="minimum span width")
    p.add_argument("--max", type=int, default=7, help="maximum span width")
    p.add_argument("--trials", type=int, default=100_000, help="Monte Carlo trials")
    p.add_argument("--seed", type=int, default=0, help="Monte Carlo seed")
    p.add_argument("--object-size", type=int, default=640,
                   help="synthetic object size in bytes")
    p.set_defaults(func=cmd_attack)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except (TraceError, StructParseError, LayoutError, ValueError, OSError) as e:
        print(f"califorms: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
