from .common_utils import (
    JobConfig,
    label_column,
    load_config_file,
    numeric_column,
    read_csv,
    read_frame,
)
from .transforms import (
    Transform,
    TransformSpec,
    absorb,
    apply_transforms,
    demean,
    load_transform_spec,
    parse_transform_spec,
)
