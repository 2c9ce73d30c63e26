import numpy as np
import pytest

from diseasemix.cohort import Cohort, DiseaseVocabulary, PatientRecord


@pytest.fixture
def tiny_vocab():
    return DiseaseVocabulary(("100", "206", "300"))


@pytest.fixture
def tiny_cohort(tiny_vocab):
    patients = [
        PatientRecord("p1", "F", 70.0, 5.0, 4.0, True),
        PatientRecord("p2", "M", 65.5, 3.0, 3.0, False),
        PatientRecord("p3", "F", 80.25, 2.5, 1.0, True),
    ]
    counts = np.array([
        [2, 5, 0],
        [1, 0, 3],
        [0, 4, 1],
    ])
    return Cohort(tiny_vocab, patients, counts)


def write_cohort_dir(cohort, out_dir):
    """Write the three cohort files the CLI expects into a directory."""
    from diseasemix.cohort import write_cohort

    out_dir.mkdir(parents=True, exist_ok=True)
    write_cohort(
        cohort,
        out_dir / "diagnoses.csv",
        out_dir / "demographics.csv",
        out_dir / "vocabulary.txt",
    )
    return out_dir
