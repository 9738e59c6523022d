from init_sample_data import initialize_sample_data
from utils.dataset_io import read_dataset


def test_writes_every_split(tmp_path, capsys):
    manifests = initialize_sample_data(str(tmp_path), seed=2, train_images=5,
                                       test_images=3, strong_subset=2)
    assert set(manifests) == {"train_strong", "train_weak", "train_boxes", "train_semi",
                              "train_strong_subset", "test"}
    semi = [s.kind for s in read_dataset(manifests["train_semi"])]
    assert semi == ["strong", "strong", "weak", "weak", "weak"]
    assert {s.kind for s in read_dataset(manifests["train_boxes"])} == {"boxes"}
    assert len(read_dataset(manifests["test"])) == 3
    assert "Sample data written" in capsys.readouterr().out
