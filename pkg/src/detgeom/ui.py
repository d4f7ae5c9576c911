from typing import Iterable, Sequence

from rich.console import Console
from rich.markup import escape
from rich.panel import Panel
from rich.rule import Rule
from rich.table import Table
from rich.theme import Theme

from . import __version__

THEME = Theme(
    {
        "brand": "bold bright_cyan",
        "muted": "grey62",
        "ok": "bold green",
        "warn": "bold yellow",
        "err": "bold red",
        "value": "bold cyan",
    }
)

console = Console(theme=THEME)
err_console = Console(theme=THEME, stderr=True)


def banner(command: str, detail: str = "") -> None:
    console.print(Rule(style="brand"))
    console.print(f"[brand]DETGEOM {__version__}[/brand]  [muted]command:[/] {command}   [muted]{detail}[/muted]")
    console.print(Rule(style="brand"))


def num(x: float) -> str:
    return f"{x:.9g}"


def fields_panel(title: str, fields: Sequence[tuple[str, str]], ok: bool = True) -> None:
    """Labeled ``name: value`` lines in one panel."""
    width = max((len(k) for k, _ in fields), default=0)
    body = "\n".join(f"[muted]{k.ljust(width)}[/muted]  [value]{v}[/value]" for k, v in fields)
    console.print(Panel.fit(body, title=f"[brand]{title}[/brand]", border_style="ok" if ok else "err"))


def table(title: str, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    t = Table(title=title, title_style="brand", header_style="bold", border_style="muted")
    for i, h in enumerate(header):
        t.add_column(h, justify="left" if i == 0 else "right")
    for row in rows:
        t.add_row(*(num(v) if isinstance(v, float) else escape(str(v)) for v in row))
    console.print(t)


def verdict(passed: bool, message: str) -> None:
    style = "ok" if passed else "err"
    console.print(f"[{style}]{'PASS' if passed else 'FAIL'}[/{style}] {message}")


def error(message: str) -> None:
    err_console.print(f"[err]error:[/err] {escape(message)}", highlight=False)


def warn(message: str) -> None:
    err_console.print(f"[warn]warning:[/warn] {escape(message)}", highlight=False)


def artifacts(root: str, names: Sequence[str]) -> None:
    console.print(f"[muted]wrote {len(names)} files to[/muted] {root}")
    for n in names:
        console.print(f"  [muted]·[/muted] {n}")
