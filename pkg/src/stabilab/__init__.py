"""stabilab: measure and reduce cross-device prediction instability.

A desk-scale laboratory that simulates device-induced input variation
(compression, ISP, sensor noise), scores prediction divergence across
those virtual devices with an instability metric, and fine-tunes a small
built-in classifier with stability losses to shrink it.
"""

__version__ = "0.1.0"

from .dataset import (
    DatasetManifest,
    DecodeError,
    LabeledImage,
    ManifestError,
    SchemaVersionError,
    decode_image,
    dequantize_u8,
    encode_image,
    load_images,
    load_manifest,
    load_records,
    quantize_u8,
    save_manifest,
    save_records,
)
from .envsim import (
    ISP_A,
    ISP_B,
    ISP_IDENTITY,
    BayerImage,
    Distort,
    DistortionRanges,
    EnvironmentSpec,
    GaussianNoise,
    IspConfig,
    IspPipeline,
    JpegRoundtrip,
    PngRoundtrip,
    Resize,
    apply_distortion,
    apply_environment,
    apply_gaussian_noise,
    bilinear_resize,
    decode_fingerprint,
    demosaic_bilinear,
    desk_devices,
    jpeg_roundtrip,
    mosaic,
    png_roundtrip,
    sample_distort,
    simulate_isp,
)
from .metrics import (
    InstabilityReport,
    PredictionRecord,
    compute_accuracy,
    compute_instability,
    confidence_split,
    is_correct,
    pairwise_instability,
    precision_recall,
    render_report,
)
from .model import (
    ForwardResult,
    LossConfig,
    ModelParams,
    checkpoint_digest,
    cross_entropy,
    forward,
    gradient,
    init_reference_params,
    load_params,
    predict_topk,
    preprocess,
    save_params,
    sgd_step,
    softmax,
)
from .stability import (
    GeneratedSource,
    GridResult,
    PairedSource,
    StabilityConfig,
    SubsamplePoolSource,
    combined_loss,
    embedding_stability_loss,
    grid_search,
    kl_stability_loss,
    make_counterpart,
    stability_train,
)
from .synth import (
    make_desk_dataset,
    make_test_image,
    make_test_raw,
    pretraining_set,
    write_desk_dataset,
)
