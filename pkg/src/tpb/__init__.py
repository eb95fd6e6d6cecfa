"""Cross-city few-shot traffic forecasting with a clustered traffic pattern bank.

Pipeline: masked patch-autoencoder pre-training on data-rich source cities,
pattern-bank construction by cosine k-means over patch embeddings, and a
pattern-querying forecaster meta-trained with Reptile and fine-tuned on the
few-shot target city.
"""

from .autoencoder import (
    MaskedPatchAutoencoder,
    PatchDecoder,
    PatchEncoder,
    PretrainConfig,
    Standardizer,
    pretrain,
    pretrain_loss,
    reconstruction_report,
)
from .bank import (
    ClusterAssignment,
    PatternBank,
    embed_corpus,
    kmeans_cosine,
    load_bank,
    save_bank,
    select_k,
    silhouette,
    subsample,
)
from .data import (
    CityCorpus,
    CitySpec,
    CorpusBundle,
    PatchWindow,
    SynthSpec,
    TrafficSeries,
    align_interval,
    default_synth_spec,
    generate_corpus,
    generate_synthetic_city,
    patchify,
    sample_mask,
    split_source,
)
from .forecaster import ForecastConfig, ForecastModel, forecast_loss
from .meta import FinetuneConfig, MetaConfig, Task, fine_tune, reptile_meta_train, sample_task
from .metrics import mae, mape, rmse

__version__ = "0.1.0"
