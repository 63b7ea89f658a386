from __future__ import annotations

import sys
from pathlib import Path
from typing import Annotated

import typer
from massfuse.errors import MassfuseError
from massfuse.frame import FrameSchema, read_frame_csv
from massfuse.matching import match_knn

from massfuse_cli.output import emit_error, emit_success, err_console, is_json_mode


def match(
    ctx: typer.Context,
    a_file: Annotated[Path, typer.Option("--a", help="Sample A CSV")],
    b_file: Annotated[Path, typer.Option("--b", help="Sample B CSV")],
    covariates: Annotated[str, typer.Option(help="Comma-separated covariate columns")],
    k: Annotated[int, typer.Option(help="Donors per Sample A unit", min=1)] = 1,
    standardize: Annotated[bool, typer.Option(help="Standardize covariates by Sample B mean and SD")] = False,
    out: Annotated[Path | None, typer.Option("--out", "-o", help="Write the CSV here instead of stdout")] = None,
) -> None:
    """Nearest-neighbour donors for every Sample A unit as CSV: a_id, rank, donor_id, distance."""
    try:
        schema = FrameSchema(covariates=[c.strip() for c in covariates.split(",") if c.strip()])
        a = read_frame_csv(a_file, schema)
        b = read_frame_csv(b_file, schema)
        result = match_knn(a.x, b.x, k, standardize=standardize)
    except (MassfuseError, FileNotFoundError, ValueError) as e:
        emit_error(ctx, e)

    table = result.to_frame(a.ids, b.ids)
    if out is not None:
        table.to_csv(out, index=False, lineterminator="\n", float_format="%.10g")
        if is_json_mode(ctx):
            emit_success(ctx, {"file": str(out), "rows": len(table), "k": k})
        else:
            err_console.print(f"[green]Wrote {len(table)} matches to {out}[/green]")
        return
    table.to_csv(sys.stdout, index=False, lineterminator="\n", float_format="%.10g")
