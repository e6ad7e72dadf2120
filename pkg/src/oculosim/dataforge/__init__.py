from .builders import (
    EXEMPLAR_INSTRUCTION,
    RPE_ALIGNMENT,
    ExemplarSample,
    LeakageError,
    build_exemplar,
    build_rpe_sample,
    dilate,
    lesion_perturb,
    months_phrase,
)
from .completion import (
    box_downsample,
    INPAINT_COVERAGE,
    INPAINT_RECTS,
    OUTPAINT_RETAINED,
    SR_FACTORS,
    ConstraintError,
    downsample_pair,
    make_inpaint,
    make_inpaint_rects,
    make_outpaint,
)
from .degrade import (
    DegradationSpec,
    Illumination,
    MotionBlur,
    Spots,
    degrade,
    gaussian_blur,
    gaussian_kernel1d,
    motion_kernel,
    random_degradation,
)
from .intensity import BRIGHTNESS_OFFSETS, CLAHE_CLIP, CLAHE_GRID, AugmentationSpec, augment, clahe, rescale, tile_lut
from .phantom import (
    FOLLOWUP_CATEGORIES,
    Geometry,
    Lesion,
    PhantomSample,
    PhantomSpec,
    change_region,
    followup_geometry,
    gen_followup,
    gen_phantom,
    rerender,
)
