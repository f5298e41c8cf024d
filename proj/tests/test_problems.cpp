#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "dtlab/problems.hpp"
#include "dtlab/rng.hpp"

using namespace dtlab;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// Independent connectivity/path oracle: plain BFS over the open-wall graph,
// written against the adjacency arrays only.
std::vector<int> bfs_parents(const MazeInstance& m, int from) {
  const int n = m.n;
  std::vector<int> parent(n * n, -1);
  std::deque<int> q{from};
  parent[from] = from;
  while (!q.empty()) {
    int cell = q.front();
    q.pop_front();
    const int r = cell / n, c = cell % n;
    auto visit = [&](int next) {
      if (parent[next] < 0) {
        parent[next] = cell;
        q.push_back(next);
      }
    };
    if (c + 1 < n && m.open_east[cell]) visit(cell + 1);
    if (c > 0 && m.open_east[cell - 1]) visit(cell - 1);
    if (r + 1 < n && m.open_south[cell]) visit(cell + n);
    if (r > 0 && m.open_south[cell - n]) visit(cell - n);
  }
  return parent;
}

// Second, structurally different distance oracle: Tarjan's offline LCA via
// union-find on the tree rooted at cell 0.
struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int child, int into) { parent[find(child)] = find(into); }
};

int tree_distance_tarjan(const MazeInstance& m, int a, int b) {
  const int n = m.n;
  const int cells = n * n;
  std::vector<int> parent = bfs_parents(m, 0);
  std::vector<int> depth(cells, 0);
  std::vector<std::vector<int>> children(cells);
  std::vector<int> order;
  order.reserve(cells);
  {
    std::deque<int> q{0};
    while (!q.empty()) {
      int cell = q.front();
      q.pop_front();
      order.push_back(cell);
      for (int next = 0; next < cells; ++next) {
        if (next != 0 && parent[next] == cell) {
          depth[next] = depth[cell] + 1;
          children[cell].push_back(next);
          q.push_back(next);
        }
      }
    }
  }
  UnionFind uf(cells);
  std::vector<int> anc(cells);
  std::iota(anc.begin(), anc.end(), 0);
  std::vector<uint8_t> done(cells, 0);
  int lca = -1;
  // Post-order walk; when both query endpoints are done the LCA is known.
  std::vector<std::pair<int, size_t>> stack{{0, 0}};
  while (!stack.empty() && lca < 0) {
    auto& [cell, idx] = stack.back();
    if (idx < children[cell].size()) {
      int child = children[cell][idx++];
      stack.push_back({child, 0});
      continue;
    }
    done[cell] = 1;
    if (cell == a && done[b]) lca = anc[uf.find(b)];
    if (cell == b && done[a]) lca = anc[uf.find(a)];
    stack.pop_back();
    if (!stack.empty()) {
      int up = stack.back().first;
      uf.unite(cell, up);
      anc[uf.find(up)] = up;
    }
  }
  REQUIRE(lca >= 0);
  return depth[a] + depth[b] - 2 * depth[lca];
}

}  // namespace

TEST_CASE("prefix sum targets are cumulative parity") {
  CHECK(prefix_sum_target({0, 1, 1, 0}) == std::vector<uint8_t>{0, 1, 0, 0});
  CHECK(prefix_sum_target(std::vector<uint8_t>(8, 0)) ==
        std::vector<uint8_t>(8, 0));
  CHECK(prefix_sum_target({1, 1, 1, 1, 1, 1}) ==
        std::vector<uint8_t>{1, 0, 1, 0, 1, 0});
  CHECK_THROWS_WITH_AS(prefix_sum_target({0, 2, 1}),
                       doctest::Contains("not a bit"), std::runtime_error);
}

TEST_CASE("generated targets match an independent scalar recomputation") {
  Dataset d = gen_prefix_sum_dataset(48, 1000, 99);
  for (const auto& inst : d.prefix) {
    int parity = 0;
    for (size_t i = 0; i < inst.bits.size(); ++i) {
      parity = (parity + inst.bits[i]) % 2;  // naive cumulative sum mod two
      REQUIRE(inst.target[i] == parity);
    }
  }
}

TEST_CASE("prefix dataset generation is deterministic in the seed") {
  Dataset a = gen_prefix_sum_dataset(32, 50, 7);
  Dataset b = gen_prefix_sum_dataset(32, 50, 7);
  Dataset c = gen_prefix_sum_dataset(32, 50, 8);
  REQUIRE(a.prefix.size() == 50);
  bool equal = true, differs = false;
  for (size_t i = 0; i < 50; ++i) {
    equal = equal && a.prefix[i].bits == b.prefix[i].bits;
    differs = differs || a.prefix[i].bits != c.prefix[i].bits;
  }
  CHECK(equal);
  CHECK(differs);
  CHECK(a.prefix[0].bits.size() == 32);
}

TEST_CASE("generated bits are unbiased") {
  Dataset d = gen_prefix_sum_dataset(100, 1000, 21);  // 1e5 bits
  int64_t ones = 0;
  for (const auto& inst : d.prefix)
    for (uint8_t b : inst.bits) ones += b;
  const double mean = static_cast<double>(ones) / 1e5;
  CHECK(mean > 0.49);
  CHECK(mean < 0.51);
}

TEST_CASE("maze generation carves a spanning tree") {
  MazeInstance m = gen_maze(9, 4);
  CHECK(m.open_wall_count() == 80);  // 9^2 - 1
  MazeInstance again = gen_maze(9, 4);
  CHECK(m.open_east == again.open_east);
  CHECK(m.open_south == again.open_south);
  CHECK(m.start == again.start);
  CHECK(m.end == again.end);
  CHECK_THROWS_AS(gen_maze(2, 0), std::runtime_error);
}

TEST_CASE("maze invariants hold across sizes and seeds") {
  Rng seed_rng(1234);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 3 + static_cast<int>(seed_rng.uniform_int(0, 30));
    MazeInstance m = gen_maze(n, seed_rng.next_u64());
    REQUIRE(m.open_wall_count() == n * n - 1);
    std::vector<int> parent = bfs_parents(m, 0);
    for (int cell = 0; cell < n * n; ++cell) REQUIRE(parent[cell] >= 0);
    // n^2-1 edges + connected => tree (acyclic, unique paths).
    REQUIRE(m.start != m.end);
  }
}

TEST_CASE("oracle path is the unique BFS path") {
  MazeInstance m = gen_maze(5, 0);
  std::vector<int> path = maze_oracle_path(m);
  REQUIRE(path.size() >= 2);
  CHECK(path.front() == m.start);
  CHECK(path.back() == m.end);
  std::vector<int> parent = bfs_parents(m, m.start);
  std::vector<int> expect;
  for (int cell = m.end; cell != m.start; cell = parent[cell])
    expect.push_back(cell);
  expect.push_back(m.start);
  std::reverse(expect.begin(), expect.end());
  CHECK(path == expect);
}

TEST_CASE("adjacent start and end give a two-cell path") {
  for (uint64_t seed = 0; seed < 200; ++seed) {
    MazeInstance m = gen_maze(4, seed);
    std::vector<int> parent = bfs_parents(m, m.start);
    if (parent[m.end] == m.start) {
      CHECK(maze_oracle_path(m).size() == 2);
      return;
    }
  }
  FAIL("no maze with adjacent endpoints found in 200 seeds");
}

TEST_CASE("path length agrees with a union-find LCA oracle on 100 mazes") {
  Rng seed_rng(555);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + static_cast<int>(seed_rng.uniform_int(0, 8));
    MazeInstance m = gen_maze(n, seed_rng.next_u64());
    const int dist = tree_distance_tarjan(m, m.start, m.end);
    CHECK(static_cast<int>(maze_oracle_path(m).size()) == dist + 1);
  }
}

TEST_CASE("rendering geometry and target mask") {
  MazeInstance m = gen_maze(5, 3);
  const int side = m.side();
  REQUIRE(side == 16);
  REQUIRE(m.image.size() == static_cast<size_t>(3 * side * side));
  const float* red = m.image.data();
  const float* green = red + side * side;
  const float* blue = green + side * side;

  int start_pixels = 0, end_pixels = 0;
  for (int i = 0; i < side * side; ++i) {
    const bool is_start = red[i] == 1.0f && green[i] == 0.0f && blue[i] == 0.0f;
    const bool is_end = red[i] == 0.0f && green[i] == 1.0f && blue[i] == 0.0f;
    start_pixels += is_start;
    end_pixels += is_end;
  }
  CHECK(start_pixels == 4);  // one 2x2 cell block
  CHECK(end_pixels == 4);

  auto [start, end] = locate_endpoints(m);
  CHECK(start == m.start);
  CHECK(end == m.end);

  // Every target pixel lies on a corridor (non-wall) pixel.
  for (int i = 0; i < side * side; ++i) {
    if (m.target[i]) {
      const bool wall = red[i] == 0.0f && green[i] == 0.0f && blue[i] == 0.0f;
      CHECK_FALSE(wall);
    }
  }

  // The mask matches an independently traced path: cell blocks + openings.
  std::vector<int> parent = bfs_parents(m, m.start);
  std::vector<uint8_t> expect(side * side, 0);
  auto mark_block = [&](int cell) {
    const int r = cell / m.n, c = cell % m.n;
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx)
        expect[(1 + 3 * r + dy) * side + 1 + 3 * c + dx] = 1;
  };
  int cell = m.end;
  mark_block(cell);
  while (cell != m.start) {
    const int prev = parent[cell];
    mark_block(prev);
    const int r1 = prev / m.n, c1 = prev % m.n;
    const int r2 = cell / m.n, c2 = cell % m.n;
    if (r1 == r2) {
      const int wall_col = 3 * std::max(c1, c2);
      expect[(1 + 3 * r1) * side + wall_col] = 1;
      expect[(2 + 3 * r1) * side + wall_col] = 1;
    } else {
      const int wall_row = 3 * std::max(r1, r2);
      expect[wall_row * side + 1 + 3 * c1] = 1;
      expect[wall_row * side + 2 + 3 * c1] = 1;
    }
    cell = prev;
  }
  CHECK(m.target == expect);
}

TEST_CASE("dataset files round trip bit-exactly") {
  const std::string prefix_path = temp_path("dtlab_prefix.bin");
  Dataset d = gen_prefix_sum_dataset(19, 23, 5);
  save_dataset(d, prefix_path);
  Dataset loaded = load_dataset(prefix_path);
  CHECK(loaded.header.task == TaskKind::prefix_sum);
  CHECK(loaded.header.difficulty == 19);
  CHECK(loaded.header.seed == 5);
  REQUIRE(loaded.prefix.size() == d.prefix.size());
  for (size_t i = 0; i < d.prefix.size(); ++i) {
    CHECK(loaded.prefix[i].bits == d.prefix[i].bits);
    CHECK(loaded.prefix[i].target == d.prefix[i].target);
  }
  // Saving the loaded copy reproduces the same bytes.
  const std::string second = temp_path("dtlab_prefix2.bin");
  save_dataset(loaded, second);
  std::ifstream f1(prefix_path, std::ios::binary), f2(second, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);

  const std::string maze_path = temp_path("dtlab_maze.bin");
  Dataset md = gen_maze_dataset(7, 11, 9);
  save_dataset(md, maze_path);
  Dataset mloaded = load_dataset(maze_path);
  REQUIRE(mloaded.mazes.size() == md.mazes.size());
  for (size_t i = 0; i < md.mazes.size(); ++i) {
    CHECK(mloaded.mazes[i].open_east == md.mazes[i].open_east);
    CHECK(mloaded.mazes[i].open_south == md.mazes[i].open_south);
    CHECK(mloaded.mazes[i].start == md.mazes[i].start);
    CHECK(mloaded.mazes[i].end == md.mazes[i].end);
    CHECK(mloaded.mazes[i].image == md.mazes[i].image);  // re-rendered on load
    CHECK(mloaded.mazes[i].target == md.mazes[i].target);
  }
}

TEST_CASE("corrupt dataset files are rejected with diagnostics") {
  const std::string path = temp_path("dtlab_corrupt.bin");
  Dataset d = gen_prefix_sum_dataset(8, 4, 1);
  save_dataset(d, path);

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  in.close();

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::ofstream(path, std::ios::binary) << bad_magic;
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("magic"),
                       std::runtime_error);

  std::string truncated = bytes.substr(0, bytes.size() - 3);
  std::ofstream(path, std::ios::binary) << truncated;
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("truncated"),
                       std::runtime_error);

  std::string bad_version = bytes;
  bad_version[21] = 9;  // header version field
  std::ofstream(path, std::ios::binary) << bad_version;
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("version"),
                       std::runtime_error);
}

TEST_CASE("batch encoding shapes and values") {
  Dataset d = gen_prefix_sum_dataset(16, 8, 2);
  std::vector<int64_t> idx{0, 3, 5};
  Tensor x = input_batch(d, idx);
  CHECK(x.shape() == Shape{3, 1, 16});
  Labels y = target_batch(d, idx);
  CHECK(y.shape == Shape{3, 16});
  for (int64_t i = 0; i < 16; ++i) {
    CHECK(x.values()[i] == static_cast<float>(d.prefix[0].bits[i]));
    CHECK(y.values[i] == d.prefix[0].target[i]);
  }

  Dataset md = gen_maze_dataset(4, 3, 11);
  std::vector<int64_t> midx{1};
  Tensor mx = input_batch(md, midx);
  CHECK(mx.shape() == Shape{1, 3, 13, 13});
  Labels my = target_batch(md, midx);
  CHECK(my.shape == Shape{1, 13, 13});
}
