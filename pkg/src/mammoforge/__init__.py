"""mammoforge: breast-MRI segmentation pipeline and 3-D surface export.

Turns paired breast-MRI volumes (T1W anatomy + DCE lesion sequences) into
fused multi-label segmentations and exportable surface models: intensity
preprocessing, rigid co-registration, dual segmentation (classical
baselines, an external-backend protocol, and three-slice lesion
completion), human-in-the-loop revision with provenance, DSC/NSD
evaluation, and marching-cubes mesh export.
"""

from .errors import (
    BackendError,
    FormatError,
    GeometryError,
    InsufficientOverlapError,
    MammoforgeError,
    ProtocolViolationError,
    StateError,
    ValidationError,
)
from .evaluation import dice, evaluate_cohort, nsd
from .fusion import FusionResult, fuse_labels
from .hitl import CaseStore, EditStats, ProvenanceEvent, SplitAssignment
from .manifest import CaseManifest
from .mesh import (
    TriangleMesh,
    export_scene,
    marching_cubes,
    signed_volume,
    smooth_taubin,
)
from .nifti import read_nifti, write_nifti
from .dicom import read_dicom_series
from .preprocess import (
    WindowSpec,
    apply_window,
    denoise_gaussian,
    normalize_percentile,
)
from .registration import (
    RegistrationConfig,
    RegistrationResult,
    register_rigid,
    similarity,
)
from .segmentation import (
    BackendDescriptor,
    SliceAnnotation,
    complete_from_slices,
    run_backend,
    segment_baseline_breast,
    segment_baseline_lesion,
)
from .transform import RigidTransform
from .volume import (
    GridMeta,
    ImageVolume,
    LabelVolume,
    LABEL_NAMES,
    connected_components,
    resample_labels,
    resample_scalar,
    voxel_to_world,
    world_to_voxel,
)

__version__ = "0.1.0"
