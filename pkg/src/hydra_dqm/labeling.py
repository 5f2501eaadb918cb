"""Expert labeling workflow over the catalog.

Every label mutation is gated by a (user, plot_type) permission so only
the designated experts for a plot type can touch it. The grid serves
unlabeled images in chronological pages; range labeling fills a closed
timestamp interval so it stays stable across page boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

from .catalog import Catalog, ImageFilter, ImageRef, LabelRecord
from .errors import (
    NotAdmin,
    PermissionDenied,
    PlotTypeMismatch,
    UnknownClass,
    UnknownPlotType,
)

THUMB_URL_TEMPLATE = "/images/{image_id}/thumb"


@dataclass(frozen=True)
class GridPage:
    plot_type: str
    page_index: int
    page_size: int
    items: tuple[tuple[ImageRef, str], ...]  # (image, thumbnail URL)

    def to_dict(self) -> dict:
        return {
            "plot_type": self.plot_type,
            "page_index": self.page_index,
            "page_size": self.page_size,
            "items": [
                {"image": ref.to_dict(), "thumb_url": url} for ref, url in self.items
            ],
        }


class LabelingService:
    """Stateless facade: all state lives in the catalog."""

    def __init__(self, catalog: Catalog):
        self.catalog = catalog

    def grant_permission(self, admin_user: str, user: str, plot_type: str) -> None:
        """Idempotent grant; only admins may grant."""
        if not self.catalog.is_admin(admin_user):
            raise NotAdmin(admin_user)
        self.catalog.grant_permission(user, plot_type)

    def get_unlabeled_grid(self, plot_type: str, page_index: int, page_size: int) -> GridPage:
        if page_size < 1:
            raise ValueError("page_size must be >= 1")
        if not self.catalog.known_plot_type(plot_type):
            raise UnknownPlotType(plot_type)
        rows = self.catalog.query_images(
            ImageFilter(plot_type=plot_type, labeled=False),
            page_index=page_index,
            page_size=page_size,
        )
        items = tuple(
            (ref, THUMB_URL_TEMPLATE.format(image_id=ref.image_id)) for ref, _ in rows
        )
        return GridPage(plot_type, page_index, page_size, items)

    def apply_label(self, user: str, image_id: int, class_name: str) -> LabelRecord:
        image = self.catalog.get_image(image_id)
        if not self.catalog.has_permission(user, image.plot_type):
            raise PermissionDenied(f"{user} may not label {image.plot_type}")
        return self.catalog.record_label(image_id, class_name, user)

    def apply_range_label(
        self, user: str, anchor_image_id: int, target_image_id: int, class_name: str
    ) -> int:
        """Label every image of the plot type captured inside the closed
        interval spanned by the two endpoints, already labeled or not.
        Returns the number of label records written."""
        anchor = self.catalog.get_image(anchor_image_id)
        target = self.catalog.get_image(target_image_id)
        if anchor.plot_type != target.plot_type:
            raise PlotTypeMismatch(f"{anchor.plot_type} vs {target.plot_type}")
        if not self.catalog.has_permission(user, anchor.plot_type):
            raise PermissionDenied(f"{user} may not label {anchor.plot_type}")
        class_set = self.catalog.get_class_set(anchor.plot_type)
        if class_name not in class_set.classes:
            raise UnknownClass(f"{class_name!r} not in classes of {anchor.plot_type!r}")
        lo = min(anchor.captured_at, target.captured_at)
        hi = max(anchor.captured_at, target.captured_at)
        rows = self.catalog.query_images(
            ImageFilter(plot_type=anchor.plot_type, time_range=(lo, hi))
        )
        return self.catalog.record_labels_bulk(
            (ref.image_id for ref, _ in rows), class_name, user
        )
