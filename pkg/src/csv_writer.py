import csv
import os
from typing import Any, Dict, Iterable, Optional, Sequence


class CsvWriter:
    """
    Row-at-a-time CSV writer for manifests, scorecards and trajectory listings.

    Args:
        filename (str): Output path.
        overwrite (bool): Start a fresh file instead of appending to an
            existing one.
        fieldnames (Sequence[str], optional): Column order; taken from the
            first row when omitted.
    """

    def __init__(self, filename: str, overwrite: bool = False, fieldnames: Optional[Sequence[str]] = None):
        self.filename = filename
        self.overwrite = overwrite
        self.fieldnames = list(fieldnames) if fieldnames is not None else None
        self.file_exists = os.path.isfile(filename) and not overwrite
        self.file = None
        self.writer = None

    def __enter__(self):
        self.open()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def open(self):
        if not self.file:
            mode = "a" if self.file_exists else "w"
            self.file = open(self.filename, mode, newline="")

    def close(self):
        if self.file:
            self.file.close()
            self.file = None
            self.writer = None

    def write_row(self, row_dict: Dict[str, Any]) -> None:
        """Write one row; the header goes out before the first row of a new file."""
        if not self.file:
            self.open()

        if not self.writer:
            self.writer = csv.DictWriter(self.file, fieldnames=self.fieldnames or list(row_dict.keys()))
            if not self.file_exists:
                self.writer.writeheader()
                self.file_exists = True

        self.writer.writerow(row_dict)
        self.file.flush()

    def write_rows(self, rows: Iterable[Dict[str, Any]]) -> None:
        for row in rows:
            self.write_row(row)
