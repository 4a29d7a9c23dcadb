from django.conf import settings

from ...constants import IMAGE_SIZE, SEED, SHIFT_PRESETS
from ...data_synth import DomainShiftSpec, SceneSpec, generate_domain_pair
from ...exceptions import InvalidInputError
from ..base import AlignmentCommand


class Command(AlignmentCommand):
    help = "Generate the synthetic source domain and its fog-shifted target domain."

    def add_arguments(self, parser):
        parser.add_argument("--out", default=None, help="Output root (defaults to SSTA_DATA_ROOT).")
        parser.add_argument("--num-train", type=int, required=True)
        parser.add_argument("--num-val", type=int, required=True)
        parser.add_argument("--seed", type=int, default=SEED)
        parser.add_argument("--shift", choices=sorted(SHIFT_PRESETS), default="fog")
        parser.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"), default=list(IMAGE_SIZE))
        parser.add_argument("--workers", type=int, default=1)

    def run(self, *args, **options):
        if options["num_train"] < 0 or options["num_val"] < 0:
            raise InvalidInputError("Image counts must be non-negative.")
        out = options["out"] or settings.SSTA_DATA_ROOT
        scene = SceneSpec(image_size=tuple(options["image_size"]), seed=options["seed"])
        shift = DomainShiftSpec.from_preset(options["shift"], seed=options["seed"])
        counts = generate_domain_pair(out, scene, shift, options["num_train"], options["num_val"], options["workers"])
        self.success(f"Generated {counts['train']} train and {counts['val']} val images per domain in {out}")
