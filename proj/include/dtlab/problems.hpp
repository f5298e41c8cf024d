#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dtlab/tensor.hpp"

namespace dtlab {

enum class TaskKind : uint8_t { prefix_sum = 0, maze = 1 };

std::string task_name(TaskKind kind);
TaskKind task_from_name(const std::string& name);

// ---------------------------------------------------------------------------
// Prefix sums (cumulative parity of a bit string)

struct BitStringInstance {
  std::vector<uint8_t> bits;
  std::vector<uint8_t> target;  // target[i] = parity of bits[0..i]
};

// Cumulative parity; rejects entries outside {0, 1}.
std::vector<uint8_t> prefix_sum_target(const std::vector<uint8_t>& bits);

// ---------------------------------------------------------------------------
// Mazes

// Cells form an n x n grid; open walls between adjacent cells are carved so
// they always form a spanning tree (unique path between any two cells).
// Rendering: cells are 2x2 pixel blocks separated by 1-pixel walls with a
// 1-pixel outer wall, image side 3n+1. Walls are black (0,0,0), corridors
// white (1,1,1), the start cell red (1,0,0) and the end cell green (0,1,0).
struct MazeInstance {
  int n = 0;
  std::vector<uint8_t> open_east;   // n*n, wall between (r,c) and (r,c+1) open
  std::vector<uint8_t> open_south;  // n*n, wall between (r,c) and (r+1,c) open
  int start = 0;                    // row-major cell indices, start != end
  int end = 0;
  std::vector<float> image;         // 3 * side * side, RGB planes
  std::vector<uint8_t> target;      // side * side, 1 on the optimal path

  int side() const { return 3 * n + 1; }
  int cell_count() const { return n * n; }
  int open_wall_count() const;
};

struct MazeRender {
  int side = 0;
  std::vector<float> image;
  std::vector<uint8_t> target;
};

// Spanning-tree maze via seeded randomized depth-first carving; start/end
// uniform over ordered pairs of distinct cells. Rendered and labeled.
MazeInstance gen_maze(int n, uint64_t seed);

// The unique start->end cell path by breadth-first search.
std::vector<int> maze_oracle_path(const MazeInstance& maze);

MazeRender render_maze(const MazeInstance& maze);

// Recovers start/end cells from a rendered image (inverse of render_maze).
std::pair<int, int> locate_endpoints(const MazeInstance& maze);

// ---------------------------------------------------------------------------
// Dataset files

inline constexpr uint16_t kDatasetFormatVersion = 1;
inline constexpr char kDatasetMagic[4] = {'E', '2', 'H', '1'};

struct DatasetHeader {
  TaskKind task = TaskKind::prefix_sum;
  uint32_t difficulty = 0;  // bit-string length, or maze cell size n
  uint32_t count = 0;
  uint64_t seed = 0;
  uint16_t version = kDatasetFormatVersion;
};

struct Dataset {
  DatasetHeader header;
  std::vector<BitStringInstance> prefix;
  std::vector<MazeInstance> mazes;

  size_t size() const {
    return header.task == TaskKind::prefix_sum ? prefix.size() : mazes.size();
  }
  // Spatial extents of the encoded input (L, or side x side).
  Shape input_shape() const;
};

Dataset gen_prefix_sum_dataset(int length, int count, uint64_t seed);
Dataset gen_maze_dataset(int n, int count, uint64_t seed);

void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

// ---------------------------------------------------------------------------
// Batch encoding. Prefix sums become a 1-channel 1D signal in {0,1}; mazes a
// 3-channel image. Targets are per-position class labels.

Tensor input_batch(const Dataset& data, std::span<const int64_t> indices);
Labels target_batch(const Dataset& data, std::span<const int64_t> indices);

Tensor encode_prefix_input(std::span<const BitStringInstance* const> batch);
Tensor encode_maze_input(std::span<const MazeInstance* const> batch);

}  // namespace dtlab
