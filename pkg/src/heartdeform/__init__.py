"""Template mesh deformation with biharmonic coordinates.

Handle-driven deformation of tagged surface templates, the fitting losses
that steer it, simulation-readiness metrics and spline interpolation of
the resulting motion.
"""

__version__ = "0.1.0"

from .deformation import (  # noqa: E402
    BiharmonicMap,
    EnergyMatrix,
    HandleSet,
    build_energy,
    compute_biharmonic,
    deform,
    read_bhc1,
    sample_handles,
    transfer_map,
    write_bhc1,
)
from .energies import LossWeights, total_mesh_loss  # noqa: E402
from .errors import (  # noqa: E402
    DegenerateFaceError,
    DivergenceError,
    MeshValidationError,
    OpenMeshError,
    SingularSystemError,
)
from .fitting import FitConfig, FitResult, fit_handles, gradient_check  # noqa: E402
from .mesh import (  # noqa: E402
    CapTag,
    SurfaceSamples,
    TaggedMesh,
    TemplateTags,
    TriangleMesh,
    load_tagged_mesh,
    read_obj,
    write_obj,
)
from .quality import QualityReport, evaluate  # noqa: E402
from .temporal import MotionSequence, build_motion_spline, sample_motion, volume_trace  # noqa: E402

__all__ = [
    "BiharmonicMap",
    "CapTag",
    "DegenerateFaceError",
    "DivergenceError",
    "EnergyMatrix",
    "FitConfig",
    "FitResult",
    "HandleSet",
    "LossWeights",
    "MeshValidationError",
    "MotionSequence",
    "OpenMeshError",
    "QualityReport",
    "SingularSystemError",
    "SurfaceSamples",
    "TaggedMesh",
    "TemplateTags",
    "TriangleMesh",
    "build_energy",
    "build_motion_spline",
    "compute_biharmonic",
    "deform",
    "evaluate",
    "fit_handles",
    "gradient_check",
    "load_tagged_mesh",
    "read_bhc1",
    "read_obj",
    "sample_handles",
    "sample_motion",
    "total_mesh_loss",
    "transfer_map",
    "volume_trace",
    "write_bhc1",
    "write_obj",
]
