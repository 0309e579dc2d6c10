import pandas as pd

from src.csv_writer import CsvWriter


def test_header_written_once(tmp_path):
    path = str(tmp_path / "rows.csv")
    with CsvWriter(path) as writer:
        writer.write_row({"step": 1, "loss": 0.5})
        writer.write_row({"step": 2, "loss": 0.25})
    assert pd.read_csv(path).to_dict("list") == {"step": [1, 2], "loss": [0.5, 0.25]}


def test_append_keeps_existing_rows(tmp_path):
    path = str(tmp_path / "rows.csv")
    with CsvWriter(path) as writer:
        writer.write_row({"step": 1})
    with CsvWriter(path) as writer:
        writer.write_rows([{"step": 2}, {"step": 3}])
    assert pd.read_csv(path)["step"].tolist() == [1, 2, 3]


def test_overwrite_and_fieldnames(tmp_path):
    path = str(tmp_path / "rows.csv")
    with CsvWriter(path) as writer:
        writer.write_row({"a": 1, "b": 2})
    with CsvWriter(path, overwrite=True, fieldnames=["b", "a"]) as writer:
        writer.write_row({"a": 3, "b": 4})
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["b", "a"]
    assert frame.values.tolist() == [[4, 3]]


def test_writes_without_context_manager(tmp_path):
    path = str(tmp_path / "rows.csv")
    writer = CsvWriter(path)
    writer.write_row({"x": "y"})
    writer.close()
    assert pd.read_csv(path)["x"].tolist() == ["y"]
