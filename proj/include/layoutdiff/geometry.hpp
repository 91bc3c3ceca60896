#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "layoutdiff/errors.hpp"

namespace layoutdiff {

// Axis-aligned box in canvas units, origin at the top-left corner.
// (x0, y0) is the top-left corner, (x1, y1) the bottom-right one. Raw model
// output may transiently violate the corner ordering; clamp_box restores it.
struct BoundingBox {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 0.0;
    double y1 = 0.0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x0 + x1); }
    double center_y() const { return 0.5 * (y0 + y1); }

    bool is_finite() const {
        return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1);
    }

    bool operator==(const BoundingBox& o) const {
        return x0 == o.x0 && y0 == o.y0 && x1 == o.x1 && y1 == o.y1;
    }
};

struct SceneObject {
    std::string description;
    BoundingBox box;
};

// Ordered set of described boxes on a canvas.
struct Layout {
    std::vector<SceneObject> objects;
    double width = 0.0;
    double height = 0.0;

    double aspect_ratio() const { return width / height; }
    std::size_t size() const { return objects.size(); }
};

// Boxes mapped to the aspect-agnostic [-1, 1]^4 space the denoiser works in,
// padded to a fixed capacity with a validity mask. Padded rows are zero and
// excluded from loss and metrics.
struct NormalizedBoxes {
    Eigen::MatrixXd coords;  // n_max x 4
    std::vector<bool> mask;  // n_max entries, true = real object
    int valid_count = 0;

    int capacity() const { return static_cast<int>(coords.rows()); }
};

inline void check_canvas(double width, double height) {
    if (!(width > 0.0) || !(height > 0.0) || !std::isfinite(width) || !std::isfinite(height)) {
        throw InvalidCanvasError("canvas dimensions must be positive and finite, got " +
                                 std::to_string(width) + "x" + std::to_string(height));
    }
}

inline void validate_layout(const Layout& layout) {
    check_canvas(layout.width, layout.height);
    for (const auto& obj : layout.objects) {
        if (obj.description.find_first_not_of(" \t\n\r") == std::string::npos) {
            throw ContractError("scene object with empty description");
        }
        if (!obj.box.is_finite()) {
            throw ContractError("non-finite box coordinates for '" + obj.description + "'");
        }
    }
}

// Clamp to the canvas and restore corner ordering. Idempotent.
inline BoundingBox clamp_box(BoundingBox box, double width, double height) {
    if (box.x0 > box.x1) std::swap(box.x0, box.x1);
    if (box.y0 > box.y1) std::swap(box.y0, box.y1);
    box.x0 = std::clamp(box.x0, 0.0, width);
    box.x1 = std::clamp(box.x1, 0.0, width);
    box.y0 = std::clamp(box.y0, 0.0, height);
    box.y1 = std::clamp(box.y1, 0.0, height);
    return box;
}

// Divide x by W and y by H, then map [0, 1] -> [-1, 1]. The result is the
// same for any proportional rescaling of the layout.
inline NormalizedBoxes normalize(const Layout& layout, int n_max = 0) {
    check_canvas(layout.width, layout.height);
    const int n = static_cast<int>(layout.objects.size());
    if (n_max <= 0) n_max = n;
    if (n > n_max) {
        throw ContractError("layout has " + std::to_string(n) + " objects, capacity is " +
                            std::to_string(n_max));
    }
    NormalizedBoxes out;
    out.coords = Eigen::MatrixXd::Zero(n_max, 4);
    out.mask.assign(static_cast<std::size_t>(n_max), false);
    out.valid_count = n;
    for (int i = 0; i < n; ++i) {
        const BoundingBox& b = layout.objects[static_cast<std::size_t>(i)].box;
        out.coords(i, 0) = b.x0 / layout.width * 2.0 - 1.0;
        out.coords(i, 1) = b.y0 / layout.height * 2.0 - 1.0;
        out.coords(i, 2) = b.x1 / layout.width * 2.0 - 1.0;
        out.coords(i, 3) = b.y1 / layout.height * 2.0 - 1.0;
        out.mask[static_cast<std::size_t>(i)] = true;
    }
    return out;
}

// Inverse of normalize for the valid rows; out-of-range values are mapped
// back to canvas units and then clamped.
inline std::vector<BoundingBox> denormalize(const NormalizedBoxes& boxes, double width, double height) {
    check_canvas(width, height);
    std::vector<BoundingBox> out;
    out.reserve(static_cast<std::size_t>(boxes.valid_count));
    for (int i = 0; i < boxes.capacity(); ++i) {
        if (!boxes.mask[static_cast<std::size_t>(i)]) continue;
        BoundingBox b;
        b.x0 = (boxes.coords(i, 0) + 1.0) * 0.5 * width;
        b.y0 = (boxes.coords(i, 1) + 1.0) * 0.5 * height;
        b.x1 = (boxes.coords(i, 2) + 1.0) * 0.5 * width;
        b.y1 = (boxes.coords(i, 3) + 1.0) * 0.5 * height;
        out.push_back(clamp_box(b, width, height));
    }
    return out;
}

// Data hygiene report; degenerate boxes are allowed (detector-grounded
// corpora contain them) but worth surfacing.
struct LayoutLint {
    int zero_area_boxes = 0;
    int out_of_canvas_boxes = 0;
};

inline LayoutLint lint_layout(const Layout& layout) {
    LayoutLint lint;
    for (const auto& obj : layout.objects) {
        if (obj.box.area() <= 0.0) ++lint.zero_area_boxes;
        if (obj.box.x0 < 0.0 || obj.box.y0 < 0.0 || obj.box.x1 > layout.width ||
            obj.box.y1 > layout.height || obj.box.x0 > obj.box.x1 || obj.box.y0 > obj.box.y1) {
            ++lint.out_of_canvas_boxes;
        }
    }
    return lint;
}

}  // namespace layoutdiff
