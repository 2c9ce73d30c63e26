"""diseasemix: latent disease clusters and patient subgroups from
diagnosis-count cohorts.

The package pairs a multinomial topic model baseline with a Poisson
mixture that measures excess diagnoses over age/sex-expected baselines,
plus the downstream machinery to evaluate the resulting patient
subgroups: clustering, survival analysis, comorbidity statistics and 2-D
disease embeddings. A synthetic-cohort generator stands in for private
registry data.
"""

__version__ = "0.1.0"

from .cluster import BirchSubgrouper, KMeansSubgrouper, SubgroupAssignment, WardSubgrouper, sweep_subgroups
from .cohort import (
    Cohort,
    DiseaseVocabulary,
    ExposureBins,
    PatientRecord,
    bin_exposure,
    load_cohort,
    validate_cohort,
    write_cohort,
)
from .embed import ExactTsne, export_embedding, perplexity_calibration
from .errors import DataError, DiseasemixError, NumericalError, UsageError
from .generate import GeneratorConfig, GroundTruth, generate_synthetic_cohort, preset_config
from .lda import LatentDirichletGibbs, log_likelihood, patient_topic_posterior
from .pdm import PoissonDirichletModel, mh_accept_prob, patient_topic_posterior_pdm
from .rates import ExpectedCounts, PoissonRateModel, RateTable, SplineBasis
from .stats import (
    ECI_CATEGORIES,
    EciProfile,
    KmCurve,
    chi_square_sf,
    eci_profile,
    kaplan_meier,
    kruskal_wallis,
    log_rank_test,
    subgroup_report,
)
from .topics import TopicFit

__all__ = [
    "__version__",
    "BirchSubgrouper", "KMeansSubgrouper", "SubgroupAssignment", "WardSubgrouper",
    "sweep_subgroups",
    "Cohort", "DiseaseVocabulary", "ExposureBins", "PatientRecord",
    "bin_exposure", "load_cohort", "validate_cohort", "write_cohort",
    "ExactTsne", "export_embedding", "perplexity_calibration",
    "DataError", "DiseasemixError", "NumericalError", "UsageError",
    "GeneratorConfig", "GroundTruth", "generate_synthetic_cohort", "preset_config",
    "LatentDirichletGibbs", "log_likelihood", "patient_topic_posterior",
    "PoissonDirichletModel", "mh_accept_prob", "patient_topic_posterior_pdm",
    "ExpectedCounts", "PoissonRateModel", "RateTable", "SplineBasis",
    "ECI_CATEGORIES", "EciProfile", "KmCurve", "chi_square_sf", "eci_profile",
    "kaplan_meier", "kruskal_wallis", "log_rank_test", "subgroup_report",
    "TopicFit",
]
