#!/usr/bin/env python3
"""Regenerate docs/cli_reference.md from the argparse definitions."""

import io
from contextlib import redirect_stdout
from pathlib import Path

from catreid.cli import build_parser

SUBCOMMANDS = ["ingest", "crop-preview", "augment-preview", "train", "eval",
               "query", "export-embeddings", "project", "toy-data"]


def capture_help(argv):
    parser = build_parser()
    buf = io.StringIO()
    try:
        with redirect_stdout(buf):
            parser.parse_args(argv)
    except SystemExit:
        pass
    return buf.getvalue()


def main():
    out = ["# Command-line reference",
           "",
           "Generated by `tools/gen_cli_reference.py`; do not edit by hand.",
           "",
           "```",
           capture_help(["--help"]).rstrip(),
           "```",
           ""]
    for sub in SUBCOMMANDS:
        out.append(f"## `catreid {sub}`")
        out.append("")
        out.append("```")
        out.append(capture_help([sub, "--help"]).rstrip())
        out.append("```")
        out.append("")
    out.append("Exit codes: `0` success, `2` usage error, `3` missing file "
               "or bad configuration, `4` data validation failure, `1` "
               "unexpected error. Failures print one machine-parsable line "
               "`catreid-error code=<n> msg=...` on standard error.")
    out.append("")
    target = Path(__file__).resolve().parent.parent / "docs" / "cli_reference.md"
    target.write_text("\n".join(out))
    print(f"wrote {target}")


if __name__ == "__main__":
    main()
