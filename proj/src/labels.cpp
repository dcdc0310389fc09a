#include "advperc/labels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace advperc {

std::string_view to_string(Task task) {
  switch (task) {
    case Task::distance: return "distance";
    case Task::segmentation: return "segmentation";
    case Task::motion: return "motion";
    case Task::detection: return "detection";
  }
  return "unknown";
}

Task task_from_string(std::string_view name) {
  for (auto t : kAllTasks) {
    if (to_string(t) == name) return t;
  }
  throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

double box_iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2));
  const double iy = std::max(0.0, std::min(a.cy + a.h / 2, b.cy + b.h / 2) - std::max(a.cy - a.h / 2, b.cy - b.h / 2));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

void validate_box(const Box& box) {
  if (!(box.w > 0.0) || !(box.h > 0.0)) throw std::invalid_argument("malformed box: non-positive width or height");
  if (!(box.cx >= 0.0 && box.cx <= 1.0 && box.cy >= 0.0 && box.cy <= 1.0)) {
    throw std::invalid_argument("malformed box: center outside the unit square");
  }
  if (box.cls < 0 || box.cls >= det::kNumClasses) throw std::invalid_argument("malformed box: class out of range");
}

}  // namespace advperc
