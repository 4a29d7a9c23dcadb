from ...evaluation import export_cam
from ..base import AlignmentCommand


class Command(AlignmentCommand):
    help = "Write the query-averaged cross-attention map of one image as a text grid."

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--image", required=True)
        parser.add_argument("--out", required=True)
        parser.add_argument("--per-query", action="store_true", help="Include every query's CAM row.")

    def run(self, *args, **options):
        export = export_cam(options["checkpoint"], options["image"], options["out"], per_query=options["per_query"])
        height, width = export.grid_shape
        self.success(f"Wrote {height}x{width} CAM to {export.grid_path} (mask {export.mask_path.name})")
