#pragma once

#include <array>
#include <cstddef>
#include <string_view>

namespace advperc {

enum class Task { distance, segmentation, motion, detection };
inline constexpr std::array<Task, 4> kAllTasks = {Task::distance, Task::segmentation, Task::motion,
                                                  Task::detection};

std::string_view to_string(Task task);
Task task_from_string(std::string_view name);

namespace seg {
inline constexpr int kVoid = 0;
inline constexpr int kRoad = 1;
inline constexpr int kLane = 2;
inline constexpr int kCurb = 3;
inline constexpr int kVehicle = 4;
inline constexpr int kPedestrian = 5;
inline constexpr int kRider = 6;
inline constexpr int kNumClasses = 7;
}  // namespace seg

namespace motion {
inline constexpr int kStatic = 0;
inline constexpr int kDynamic = 1;
inline constexpr int kNumClasses = 2;
}  // namespace motion

namespace det {
inline constexpr int kPedestrian = 0;
inline constexpr int kVehicle = 1;
inline constexpr int kRider = 2;
inline constexpr int kTrafficSign = 3;
inline constexpr int kTrafficLight = 4;
inline constexpr int kNumClasses = 5;
// Detection head channel layout per grid cell.
inline constexpr std::size_t kObjectness = 0;
inline constexpr std::size_t kBoxBegin = 1;  // tx, ty (cell-relative), w, h (image-relative)
inline constexpr std::size_t kClassBegin = 5;
inline constexpr std::size_t kChannels = 10;
}  // namespace det

/// Axis-aligned box in image-normalized coordinates.
struct Box {
  int cls = 0;
  double cx = 0, cy = 0, w = 0, h = 0;
  double score = 1.0;
};

double box_iou(const Box& a, const Box& b);
/// Throws std::invalid_argument on w/h <= 0 or a center outside [0,1].
void validate_box(const Box& box);

}  // namespace advperc
