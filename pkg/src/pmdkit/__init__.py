"""Phase-measuring deflectometry for near-flat specular surfaces."""
from .core import (CameraIntrinsics, CameraPose, CaptureBundle, CaptureGeometry, ScreenGeometry,
                   bilinear_sample)
from .normals import (DepthMap, NormalMap, integrate_frankot_chellappa, normals_from_gradients,
                      phase_to_slope_scale)
from .patterns import PatternSpec, build_sequence, gen_fringe
from .phase import (GradientMap, PhaseRetrievalResult, ValidityMask, highpass_gradients,
                    retrieve_phase, unwrap_two_freq, validity_mask)

__version__ = "0.1.0"
