"""
Rendering of reports: aligned text tables on the console via ``rich``, and
plain CSV or JSON for files and pipes.

Every report is passed around as ``(columns, rows)``, where ``rows`` is a list
of sequences in column order, so each format is one function.
"""
import csv
import io
import json

from rich.console import Console
from rich.table import Table


def _cell(value):
    if isinstance(value, bool) or value is None:
        return str(value)
    if isinstance(value, int):
        return '{:,}'.format(value)
    if isinstance(value, float):
        return '{:.6g}'.format(value)
    if isinstance(value, (tuple, list)):
        return 'x'.join(str(v) for v in value)
    return str(value)


def rich_table(columns, rows, title=None):
    """:returns: ``rich.table.Table`` with numbers right-aligned"""
    table = Table(title=title)
    first = rows[0] if rows else [None] * len(columns)
    for col, sample in zip(columns, first):
        numeric = isinstance(sample, (int, float)) and not isinstance(sample, bool)
        table.add_column(col, justify='right' if numeric else 'left')
    for row in rows:
        table.add_row(*(_cell(v) for v in row))
    return table


def print_table(columns, rows, title=None, console=None):
    console = console or Console()
    console.print(rich_table(columns, rows, title))


def to_csv(columns, rows):
    """:returns: CSV text with a header line and ``\\n`` line endings"""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def write_csv(path, columns, rows):
    with open(path, 'w', newline='') as f:
        f.write(to_csv(columns, rows))


def to_json(obj):
    """Stable, indented JSON text"""
    return json.dumps(obj, indent=2, sort_keys=True) + '\n'


def records(columns, rows):
    """Rows as a list of ``{column: value}`` dicts, for JSON output"""
    return [dict(zip(columns, row)) for row in rows]
