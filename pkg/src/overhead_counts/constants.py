"""
Constants and name registries for overhead-counts.

This module is the single source of truth for distribution families, input
modes, palettes, category labels and the numeric defaults shared across
modules. It decouples data definitions from the numerical code and the CLI.
"""

from pathlib import Path

from .errors import ParameterError


class CodeMapper:
    """
    Bidirectional mapping between names and integer codes.

    Handles strict validation, normalization (case-insensitivity), and
    human-readable error messages.
    """

    def __init__(self, mapping: dict[str, int], unknown_label: str = "unknown"):
        # Store as lower-case keys for case-insensitive lookup
        self._name_to_code: dict[str, int] = {k.lower(): v for k, v in mapping.items()}
        self._code_to_name: dict[int, str] = {v: k for k, v in mapping.items()}
        self._unknown_label = unknown_label
        self._display_names = sorted(mapping.keys())

    def get_code(self, name: str) -> int:
        """
        Get integer code for a string name.

        Raises:
            ParameterError: If the name is unknown.
        """
        if not name:
            raise ParameterError(f"Invalid name: '{name}'. Must be one of: {self.options_str}")

        code = self._name_to_code.get(name.lower())
        if code is None:
            raise ParameterError(f"Unknown name '{name}'. Must be one of: {self.options_str}")
        return code

    def get_name(self, code: int | None) -> str:
        """Get the name for a code, or the unknown label."""
        if code is None:
            return self._unknown_label
        return self._code_to_name.get(code, self._unknown_label)

    def normalize(self, name: str) -> str:
        """Validate a name and return its canonical spelling."""
        return self.get_name(self.get_code(name))

    @property
    def options_str(self) -> str:
        """Return comma-separated list of valid options."""
        return ", ".join(self._display_names)

    @property
    def names(self) -> list[str]:
        """Return list of valid option names."""
        return self._display_names


# =============================================================================
# Distribution Families
# =============================================================================
FAMILY_POISSON = 1
FAMILY_NEGBINOMIAL = 2
FAMILY_GAUSSIAN = 3

FAMILIES = CodeMapper({
    "poisson": FAMILY_POISSON,
    "nb": FAMILY_NEGBINOMIAL,
    "gaussian": FAMILY_GAUSSIAN,
})

# Number of C-wide output blocks each family's head emits
FAMILY_HEADS = {
    "poisson": 1,
    "nb": 2,
    "gaussian": 2,
}

# Row labels for results tables
FAMILY_DISPLAY = {
    "poisson": "Poisson",
    "nb": "Neg. Binomial",
    "gaussian": "Gaussian",
}

# =============================================================================
# Model Input
# =============================================================================
INPUT_MODE_TILE = 1
INPUT_MODE_FEATURES = 2

INPUT_MODES = CodeMapper({
    "tile": INPUT_MODE_TILE,
    "features": INPUT_MODE_FEATURES,
})

# =============================================================================
# Rendering
# =============================================================================
PALETTE_GREEN = 1
PALETTE_CATEGORICAL = 2

PALETTES = CodeMapper({
    "green": PALETTE_GREEN,
    "categorical": PALETTE_CATEGORICAL,
})

# Light-to-dark green ramp endpoints: higher expected counts render darker
GREEN_LOW = (247, 252, 245)
GREEN_HIGH = (0, 68, 27)

CLUSTER_COLORS = (
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (140, 86, 75),
    (227, 119, 194),
    (127, 127, 127),
    (188, 189, 34),
    (23, 190, 207),
)

NODATA_COLOR = (0, 0, 0)

# =============================================================================
# Numeric Defaults
# =============================================================================
DEFAULT_CATEGORY_COUNT = 91
DEFAULT_THRESHOLD = 0.5
DEFAULT_TEST_FRACTION = 0.25

# Average objects per image with at least one detection in the ground-level data
REFERENCE_MEAN_OBJECTS = 2.63

# Post-link floor for distribution parameters
PARAM_FLOOR = 1e-8
# Above this, softplus(x) is evaluated as x + exp(-x)
SOFTPLUS_LINEAR_CUTOFF = 30.0

# Side length (degrees) of a tile footprint when the dataset gives no bounds
DEFAULT_TILE_SPAN_DEG = 0.002

DEFAULT_BANDWIDTH_DEG = 0.5
NODATA_RADIUS_BANDWIDTHS = 5.0

DEFAULT_CLUSTERS = 10
DEFAULT_RESTARTS = 8
MAX_LLOYD_ITERATIONS = 300

PIXEL_MAXVAL = 255

# =============================================================================
# Category Labels
# =============================================================================
# MS-COCO detector label ids; index 0 is background, blank entries are ids the
# detector's label map never assigns.
COCO_LABELS = (
    "background", "person", "bicycle", "car", "motorcycle", "airplane", "bus",
    "train", "truck", "boat", "traffic light", "fire hydrant", "", "stop sign",
    "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "", "backpack", "umbrella", "", "",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball",
    "kite", "baseball bat", "baseball glove", "skateboard", "surfboard",
    "tennis racket", "bottle", "", "wine glass", "cup", "fork", "knife", "spoon",
    "bowl", "banana", "apple", "sandwich", "orange", "broccoli", "carrot",
    "hot dog", "pizza", "donut", "cake", "chair", "couch", "potted plant", "bed",
    "", "dining table", "", "", "toilet", "", "tv", "laptop", "mouse", "remote",
    "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
    "refrigerator", "", "book", "clock", "vase", "scissors", "teddy bear",
    "hair drier", "toothbrush",
)


class CategoryLabels:
    """
    Maps category indices to display names and resolves user input.

    Accepts either a name (case-insensitive) or a decimal index. Blank labels
    fall back to the index itself.
    """

    def __init__(self, category_count: int, names: list[str] | tuple[str, ...] | None = None):
        if category_count < 1:
            raise ParameterError(f"category_count must be >= 1 (got {category_count})")
        names = list(names or [])
        if len(names) > category_count:
            raise ParameterError(
                f"Label list has {len(names)} entries but only {category_count} categories"
            )
        self.category_count = category_count
        self._labels = [names[i] if i < len(names) and names[i] else str(i)
                        for i in range(category_count)]
        self._mapper = CodeMapper({
            label: i for i, label in enumerate(self._labels) if i < len(names) and names[i]
        })

    @classmethod
    def from_option(cls, category_count: int, option: str | None) -> "CategoryLabels":
        """Build labels from a CLI option: None, 'coco', or a label file path."""
        if not option:
            return cls(category_count)
        if option.lower() == "coco":
            return cls(category_count, COCO_LABELS[:category_count])
        path = Path(option)
        if not path.exists():
            raise ParameterError(f"Label file not found: {path}")
        lines = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
        return cls(category_count, lines)

    def label(self, index: int) -> str:
        return self._labels[index]

    def resolve(self, value: str | int) -> int:
        """Resolve a category name or index to an index."""
        if isinstance(value, int) or str(value).strip().isdigit():
            index = int(value)
            if 0 <= index < self.category_count:
                return index
            raise ParameterError(
                f"Unknown category index {index}. Must be in [0, {self.category_count}) "
                f"or one of: {self.options_str}"
            )
        try:
            return self._mapper.get_code(str(value))
        except ParameterError:
            raise ParameterError(
                f"Unknown category '{value}'. Must be an index in [0, {self.category_count}) "
                f"or one of: {self.options_str}"
            ) from None

    @property
    def options_str(self) -> str:
        return self._mapper.options_str or "(no named categories)"

    @property
    def labels(self) -> list[str]:
        return list(self._labels)
