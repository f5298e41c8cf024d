#include "dtlab/problems.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <deque>
#include <fstream>
#include <stdexcept>

#include "dtlab/rng.hpp"

namespace dtlab {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}
void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const uint8_t* p;
  size_t left;
  const std::string& path;

  void need(size_t n, const char* what) {
    if (left < n) fail(path + ": truncated payload while reading " + what);
  }
  uint8_t u8(const char* what) {
    need(1, what);
    --left;
    return *p++;
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = static_cast<uint16_t>(p[0] | (p[1] << 8));
    p += 2;
    left -= 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    p += 4;
    left -= 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    p += 8;
    left -= 8;
    return v;
  }
  void bytes(uint8_t* dst, size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, p, n);
    p += n;
    left -= n;
  }
};

void pack_bits(std::span<const uint8_t> bits, std::string& out) {
  size_t nbytes = (bits.size() + 7) / 8;
  for (size_t i = 0; i < nbytes; ++i) {
    uint8_t b = 0;
    for (size_t j = 0; j < 8 && i * 8 + j < bits.size(); ++j)
      b |= static_cast<uint8_t>((bits[i * 8 + j] & 1) << j);
    out.push_back(static_cast<char>(b));
  }
}

std::vector<uint8_t> unpack_bits(Reader& r, size_t count, const char* what) {
  size_t nbytes = (count + 7) / 8;
  std::vector<uint8_t> packed(nbytes);
  r.bytes(packed.data(), nbytes, what);
  std::vector<uint8_t> bits(count);
  for (size_t i = 0; i < count; ++i) bits[i] = (packed[i / 8] >> (i % 8)) & 1;
  return bits;
}

}  // namespace

std::string task_name(TaskKind kind) {
  return kind == TaskKind::prefix_sum ? "prefix" : "maze";
}

TaskKind task_from_name(const std::string& name) {
  if (name == "prefix") return TaskKind::prefix_sum;
  if (name == "maze") return TaskKind::maze;
  fail("unknown task '" + name + "' (expected prefix or maze)");
}

std::vector<uint8_t> prefix_sum_target(const std::vector<uint8_t>& bits) {
  std::vector<uint8_t> target(bits.size());
  uint8_t parity = 0;
  for (size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] > 1)
      fail("prefix_sum_target: entry " + std::to_string(i) + " is " +
           std::to_string(int(bits[i])) + ", not a bit");
    parity ^= bits[i];
    target[i] = parity;
  }
  return target;
}

int MazeInstance::open_wall_count() const {
  int c = 0;
  for (uint8_t v : open_east) c += v;
  for (uint8_t v : open_south) c += v;
  return c;
}

namespace {

// Neighbors of cell (r, c) reachable through open walls.
template <typename Fn>
void for_each_open_neighbor(const MazeInstance& m, int cell, Fn&& fn) {
  const int n = m.n;
  const int r = cell / n, c = cell % n;
  if (c + 1 < n && m.open_east[cell]) fn(cell + 1);
  if (c > 0 && m.open_east[cell - 1]) fn(cell - 1);
  if (r + 1 < n && m.open_south[cell]) fn(cell + n);
  if (r > 0 && m.open_south[cell - n]) fn(cell - n);
}

void fill_block(std::vector<float>& image, int side, int channel, int r, int c,
                float v) {
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      image[(channel * side + (1 + 3 * r + dy)) * side + (1 + 3 * c + dx)] = v;
    }
  }
}

}  // namespace

MazeInstance gen_maze(int n, uint64_t seed) {
  if (n < 3) fail("gen_maze: cell size " + std::to_string(n) + " < 3");
  MazeInstance m;
  m.n = n;
  m.open_east.assign(static_cast<size_t>(n) * n, 0);
  m.open_south.assign(static_cast<size_t>(n) * n, 0);

  Rng rng(seed);
  std::vector<uint8_t> visited(static_cast<size_t>(n) * n, 0);
  std::vector<int> stack;
  int first = static_cast<int>(rng.uniform_int(0, int64_t(n) * n - 1));
  stack.push_back(first);
  visited[first] = 1;
  std::array<int, 4> dirs{};
  while (!stack.empty()) {
    int cell = stack.back();
    const int r = cell / n, c = cell % n;
    int ndirs = 0;
    if (c + 1 < n && !visited[cell + 1]) dirs[ndirs++] = 0;   // east
    if (r + 1 < n && !visited[cell + n]) dirs[ndirs++] = 1;   // south
    if (c > 0 && !visited[cell - 1]) dirs[ndirs++] = 2;       // west
    if (r > 0 && !visited[cell - n]) dirs[ndirs++] = 3;       // north
    if (ndirs == 0) {
      stack.pop_back();
      continue;
    }
    int d = dirs[rng.uniform_int(0, ndirs - 1)];
    int next = cell;
    switch (d) {
      case 0: m.open_east[cell] = 1; next = cell + 1; break;
      case 1: m.open_south[cell] = 1; next = cell + n; break;
      case 2: m.open_east[cell - 1] = 1; next = cell - 1; break;
      case 3: m.open_south[cell - n] = 1; next = cell - n; break;
    }
    visited[next] = 1;
    stack.push_back(next);
  }

  m.start = static_cast<int>(rng.uniform_int(0, int64_t(n) * n - 1));
  m.end = static_cast<int>(rng.uniform_int(0, int64_t(n) * n - 2));
  if (m.end >= m.start) ++m.end;  // uniform over ordered pairs of distinct cells

  MazeRender render = render_maze(m);
  m.image = std::move(render.image);
  m.target = std::move(render.target);
  return m;
}

std::vector<int> maze_oracle_path(const MazeInstance& maze) {
  const int cells = maze.cell_count();
  if (maze.start == maze.end) fail("maze_oracle_path: start equals end");
  std::vector<int> parent(cells, -1);
  std::deque<int> queue{maze.start};
  parent[maze.start] = maze.start;
  while (!queue.empty()) {
    int cell = queue.front();
    queue.pop_front();
    if (cell == maze.end) break;
    for_each_open_neighbor(maze, cell, [&](int next) {
      if (parent[next] < 0) {
        parent[next] = cell;
        queue.push_back(next);
      }
    });
  }
  if (parent[maze.end] < 0)
    fail("maze_oracle_path: end cell unreachable (graph is not spanning)");
  std::vector<int> path;
  for (int cell = maze.end; cell != maze.start; cell = parent[cell])
    path.push_back(cell);
  path.push_back(maze.start);
  std::reverse(path.begin(), path.end());
  return path;
}

MazeRender render_maze(const MazeInstance& maze) {
  const int n = maze.n;
  const int side = maze.side();
  MazeRender out;
  out.side = side;
  out.image.assign(3 * static_cast<size_t>(side) * side, 0.0f);
  out.target.assign(static_cast<size_t>(side) * side, 0);

  // Corridors: every cell block, plus the 2-pixel gaps of open walls.
  auto open_corridor = [&](int row, int col) {
    for (int ch = 0; ch < 3; ++ch)
      out.image[(ch * static_cast<size_t>(side) + row) * side + col] = 1.0f;
  };
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          open_corridor(1 + 3 * r + dy, 1 + 3 * c + dx);
      const int cell = r * n + c;
      if (c + 1 < n && maze.open_east[cell]) {
        open_corridor(1 + 3 * r, 3 * (c + 1));
        open_corridor(2 + 3 * r, 3 * (c + 1));
      }
      if (r + 1 < n && maze.open_south[cell]) {
        open_corridor(3 * (r + 1), 1 + 3 * c);
        open_corridor(3 * (r + 1), 2 + 3 * c);
      }
    }
  }

  // Start red, end green: zero out the other channels over the cell block.
  const int sr = maze.start / n, sc = maze.start % n;
  const int er = maze.end / n, ec = maze.end % n;
  fill_block(out.image, side, 1, sr, sc, 0.0f);
  fill_block(out.image, side, 2, sr, sc, 0.0f);
  fill_block(out.image, side, 0, er, ec, 0.0f);
  fill_block(out.image, side, 2, er, ec, 0.0f);

  // Target: the unique path's cell blocks and the wall openings between
  // consecutive path cells.
  std::vector<int> path = maze_oracle_path(maze);
  auto mark = [&](int row, int col) {
    out.target[static_cast<size_t>(row) * side + col] = 1;
  };
  for (size_t i = 0; i < path.size(); ++i) {
    const int r = path[i] / n, c = path[i] % n;
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) mark(1 + 3 * r + dy, 1 + 3 * c + dx);
    if (i + 1 < path.size()) {
      const int r2 = path[i + 1] / n, c2 = path[i + 1] % n;
      if (r2 == r) {  // horizontal move
        const int wall_col = 3 * std::max(c, c2);
        mark(1 + 3 * r, wall_col);
        mark(2 + 3 * r, wall_col);
      } else {  // vertical move
        const int wall_row = 3 * std::max(r, r2);
        mark(wall_row, 1 + 3 * c);
        mark(wall_row, 2 + 3 * c);
      }
    }
  }
  return out;
}

std::pair<int, int> locate_endpoints(const MazeInstance& maze) {
  const int n = maze.n;
  const int side = maze.side();
  int start = -1, end = -1;
  const float* red = maze.image.data();
  const float* green = maze.image.data() + static_cast<size_t>(side) * side;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const size_t px = static_cast<size_t>(1 + 3 * r) * side + (1 + 3 * c);
      if (red[px] == 1.0f && green[px] == 0.0f) start = r * n + c;
      if (green[px] == 1.0f && red[px] == 0.0f) end = r * n + c;
    }
  }
  if (start < 0 || end < 0) fail("locate_endpoints: missing colored block");
  return {start, end};
}

Shape Dataset::input_shape() const {
  if (header.task == TaskKind::prefix_sum)
    return {static_cast<int64_t>(header.difficulty)};
  const int side = 3 * static_cast<int>(header.difficulty) + 1;
  return {side, side};
}

Dataset gen_prefix_sum_dataset(int length, int count, uint64_t seed) {
  if (length < 1) fail("gen_prefix_sum_dataset: length must be >= 1");
  if (count < 1) fail("gen_prefix_sum_dataset: count must be >= 1");
  Dataset d;
  d.header = {TaskKind::prefix_sum, static_cast<uint32_t>(length),
              static_cast<uint32_t>(count), seed, kDatasetFormatVersion};
  d.prefix.resize(static_cast<size_t>(count));
  Rng rng(seed);
  for (auto& inst : d.prefix) {
    inst.bits.resize(static_cast<size_t>(length));
    for (auto& b : inst.bits) b = static_cast<uint8_t>(rng.bit());
    inst.target = prefix_sum_target(inst.bits);
  }
  return d;
}

Dataset gen_maze_dataset(int n, int count, uint64_t seed) {
  if (n < 3) fail("gen_maze_dataset: cell size must be >= 3");
  if (count < 1) fail("gen_maze_dataset: count must be >= 1");
  Dataset d;
  d.header = {TaskKind::maze, static_cast<uint32_t>(n),
              static_cast<uint32_t>(count), seed, kDatasetFormatVersion};
  d.mazes.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i)
    d.mazes.push_back(gen_maze(n, Rng::substream(seed, static_cast<uint64_t>(i))));
  return d;
}

void save_dataset(const Dataset& data, const std::string& path) {
  std::string out;
  out.append(kDatasetMagic, 4);
  out.push_back(static_cast<char>(data.header.task));
  put_u32(out, data.header.difficulty);
  put_u32(out, data.header.count);
  put_u64(out, data.header.seed);
  put_u16(out, data.header.version);
  if (data.header.task == TaskKind::prefix_sum) {
    if (data.prefix.size() != data.header.count)
      fail("save_dataset: header count does not match payload");
    for (const auto& inst : data.prefix) {
      pack_bits(inst.bits, out);
      pack_bits(inst.target, out);
    }
  } else {
    if (data.mazes.size() != data.header.count)
      fail("save_dataset: header count does not match payload");
    for (const auto& inst : data.mazes) {
      // Adjacency bitmask row-major: bit 2c = east wall open, 2c+1 = south.
      std::vector<uint8_t> flags(2 * inst.open_east.size());
      for (size_t c = 0; c < inst.open_east.size(); ++c) {
        flags[2 * c] = inst.open_east[c];
        flags[2 * c + 1] = inst.open_south[c];
      }
      pack_bits(flags, out);
      put_u32(out, static_cast<uint32_t>(inst.start));
      put_u32(out, static_cast<uint32_t>(inst.end));
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail("save_dataset: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) fail("save_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("load_dataset: cannot open " + path);
  std::string blob((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  Reader r{reinterpret_cast<const uint8_t*>(blob.data()), blob.size(), path};

  char magic[4];
  r.bytes(reinterpret_cast<uint8_t*>(magic), 4, "magic");
  if (std::memcmp(magic, kDatasetMagic, 4) != 0)
    fail(path + ": bad magic, not a dataset file");
  Dataset d;
  const uint8_t task = r.u8("task id");
  if (task > 1) fail(path + ": unknown task id " + std::to_string(int(task)));
  d.header.task = static_cast<TaskKind>(task);
  d.header.difficulty = r.u32("difficulty");
  d.header.count = r.u32("count");
  d.header.seed = r.u64("seed");
  d.header.version = r.u16("version");
  if (d.header.version != kDatasetFormatVersion)
    fail(path + ": format version " + std::to_string(d.header.version) +
         ", expected " + std::to_string(kDatasetFormatVersion));

  if (d.header.task == TaskKind::prefix_sum) {
    const size_t len = d.header.difficulty;
    if (len < 1) fail(path + ": zero-length prefix-sum instances");
    d.prefix.resize(d.header.count);
    for (auto& inst : d.prefix) {
      inst.bits = unpack_bits(r, len, "instance bits");
      inst.target = unpack_bits(r, len, "instance target");
    }
  } else {
    const int n = static_cast<int>(d.header.difficulty);
    if (n < 3) fail(path + ": maze cell size < 3");
    d.mazes.resize(d.header.count);
    for (auto& inst : d.mazes) {
      inst.n = n;
      std::vector<uint8_t> flags =
          unpack_bits(r, 2 * static_cast<size_t>(n) * n, "maze adjacency");
      inst.open_east.resize(static_cast<size_t>(n) * n);
      inst.open_south.resize(static_cast<size_t>(n) * n);
      for (size_t c = 0; c < inst.open_east.size(); ++c) {
        inst.open_east[c] = flags[2 * c];
        inst.open_south[c] = flags[2 * c + 1];
      }
      inst.start = static_cast<int>(r.u32("maze start"));
      inst.end = static_cast<int>(r.u32("maze end"));
      if (inst.start == inst.end || inst.start >= n * n || inst.end >= n * n)
        fail(path + ": invalid start/end cells");
      MazeRender render = render_maze(inst);  // rendering is recomputed on load
      inst.image = std::move(render.image);
      inst.target = std::move(render.target);
    }
  }
  if (r.left != 0)
    fail(path + ": " + std::to_string(r.left) + " trailing bytes after payload");
  return d;
}

Tensor encode_prefix_input(std::span<const BitStringInstance* const> batch) {
  const int64_t B = static_cast<int64_t>(batch.size());
  const int64_t L = static_cast<int64_t>(batch[0]->bits.size());
  Tensor x = Tensor::zeros({B, 1, L});
  auto v = x.mutable_values();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < L; ++i)
      v[static_cast<size_t>(b * L + i)] = static_cast<float>(batch[b]->bits[i]);
  return x;
}

Tensor encode_maze_input(std::span<const MazeInstance* const> batch) {
  const int64_t B = static_cast<int64_t>(batch.size());
  const int64_t side = batch[0]->side();
  const size_t plane = static_cast<size_t>(3 * side * side);
  Tensor x = Tensor::zeros({B, 3, side, side});
  auto v = x.mutable_values();
  for (int64_t b = 0; b < B; ++b)
    std::memcpy(v.data() + static_cast<size_t>(b) * plane,
                batch[b]->image.data(), plane * sizeof(float));
  return x;
}

Tensor input_batch(const Dataset& data, std::span<const int64_t> indices) {
  if (data.header.task == TaskKind::prefix_sum) {
    std::vector<const BitStringInstance*> ptrs;
    ptrs.reserve(indices.size());
    for (int64_t i : indices) ptrs.push_back(&data.prefix.at(static_cast<size_t>(i)));
    return encode_prefix_input(ptrs);
  }
  std::vector<const MazeInstance*> ptrs;
  ptrs.reserve(indices.size());
  for (int64_t i : indices) ptrs.push_back(&data.mazes.at(static_cast<size_t>(i)));
  return encode_maze_input(ptrs);
}

Labels target_batch(const Dataset& data, std::span<const int64_t> indices) {
  Labels y;
  const int64_t B = static_cast<int64_t>(indices.size());
  if (data.header.task == TaskKind::prefix_sum) {
    const int64_t L = static_cast<int64_t>(data.header.difficulty);
    y.shape = {B, L};
    y.values.resize(static_cast<size_t>(B * L));
    for (int64_t b = 0; b < B; ++b) {
      const auto& t = data.prefix.at(static_cast<size_t>(indices[b])).target;
      for (int64_t i = 0; i < L; ++i)
        y.values[static_cast<size_t>(b * L + i)] = t[static_cast<size_t>(i)];
    }
  } else {
    const int64_t side = 3 * static_cast<int64_t>(data.header.difficulty) + 1;
    const int64_t S = side * side;
    y.shape = {B, side, side};
    y.values.resize(static_cast<size_t>(B * S));
    for (int64_t b = 0; b < B; ++b) {
      const auto& t = data.mazes.at(static_cast<size_t>(indices[b])).target;
      for (int64_t i = 0; i < S; ++i)
        y.values[static_cast<size_t>(b * S + i)] = t[static_cast<size_t>(i)];
    }
  }
  return y;
}

}  // namespace dtlab
