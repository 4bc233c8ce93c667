#include "hybspec/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>

#include "hybspec/random.hpp"
#include "json.hpp"

namespace hybspec {

namespace {

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::string strip_comment(const std::string& line) {
  const auto hash = line.find('#');
  return hash == std::string::npos ? line : line.substr(0, hash);
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

[[noreturn]] void parse_error(const std::filesystem::path& path, std::size_t line,
                              const std::string& what) {
  throw std::runtime_error(path.string() + ":" + std::to_string(line) + ": " + what);
}

Mask indices_to_mask(const nlohmann::json& indices, std::size_t n, const std::string& name) {
  Mask mask(n, 0);
  for (const auto& v : indices) {
    const auto idx = v.get<long long>();
    if (idx < 0 || static_cast<std::size_t>(idx) >= n)
      throw std::runtime_error("mask '" + name + "' index " + std::to_string(idx) + " out of range");
    mask[static_cast<std::size_t>(idx)] = 1;
  }
  return mask;
}

}  // namespace

std::size_t mask_count(const Mask& mask) {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

void Graph::validate() const {
  if (adjacency.n() != n) throw std::invalid_argument("Graph: adjacency size != n");
  if (features.rows() != n) throw std::invalid_argument("Graph: feature rows != n");
  if (labels.size() != n) throw std::invalid_argument("Graph: label count != n");
  if (!adjacency.is_symmetric()) throw std::invalid_argument("Graph: adjacency not symmetric");
  for (std::size_t i = 0; i < n; ++i) {
    if (adjacency.at(i, i) != 0.0) throw std::invalid_argument("Graph: adjacency has a self-loop");
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw std::invalid_argument("Graph: label out of range at node " + std::to_string(i));
  }
  if (split) {
    const auto& s = *split;
    if (s.train.size() != n || s.val.size() != n || s.test.size() != n)
      throw std::invalid_argument("Graph: mask length != n");
    for (std::size_t i = 0; i < n; ++i) {
      if (s.train[i] + s.val[i] + s.test[i] > 1)
        throw std::invalid_argument("Graph: node " + std::to_string(i) + " in several masks");
    }
  }
}

double edge_homophily(const Graph& g) {
  std::size_t same = 0, total = 0;
  const auto row_ptr = g.adjacency.row_ptr();
  const auto cols = g.adjacency.col_idx();
  for (std::size_t r = 0; r < g.n; ++r) {
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
      if (cols[k] <= r) continue;
      ++total;
      if (g.labels[r] == g.labels[cols[k]]) ++same;
    }
  }
  return total == 0 ? 1.0 : static_cast<double>(same) / static_cast<double>(total);
}

CsrMatrix sym_laplacian(const CsrMatrix& adjacency) {
  if (!adjacency.is_symmetric()) throw std::invalid_argument("sym_laplacian: adjacency not symmetric");
  const std::size_t n = adjacency.n();
  const auto row_ptr = adjacency.row_ptr();
  const auto cols = adjacency.col_idx();
  const auto vals = adjacency.vals();
  std::vector<double> inv_sqrt_deg(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    double deg = 0.0;
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
      if (cols[k] == r && vals[k] != 0.0)
        throw std::invalid_argument("sym_laplacian: adjacency has a nonzero diagonal");
      deg += vals[k];
    }
    inv_sqrt_deg[r] = deg > 0.0 ? 1.0 / std::sqrt(deg) : 0.0;
  }
  std::vector<CsrMatrix::Entry> entries;
  entries.reserve(adjacency.nnz() + n);
  for (std::size_t r = 0; r < n; ++r) {
    entries.push_back({r, r, 1.0});
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
      if (cols[k] == r) continue;
      entries.push_back({r, cols[k], -inv_sqrt_deg[r] * vals[k] * inv_sqrt_deg[cols[k]]});
    }
  }
  return CsrMatrix::from_triplets(n, std::move(entries));
}

CsrMatrix l_hat(const CsrMatrix& l_sym) {
  CsrMatrix out = l_sym;
  const auto row_ptr = out.row_ptr();
  const auto cols = out.col_idx();
  auto vals = out.vals();
  for (std::size_t r = 0; r < out.n(); ++r) {
    bool has_diag = false;
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
      if (cols[k] == r) {
        vals[k] -= 1.0;
        has_diag = true;
      }
    }
    if (!has_diag) throw std::invalid_argument("l_hat: L_sym is missing a stored diagonal entry");
  }
  return out;
}

CsrMatrix l_scaled(const CsrMatrix& l_sym) {
  CsrMatrix out = l_sym;
  for (double& v : out.vals()) v *= 0.5;
  return out;
}

SpectralOperators build_operators(const CsrMatrix& adjacency) {
  SpectralOperators ops;
  ops.l_sym = sym_laplacian(adjacency);
  ops.l_hat = l_hat(ops.l_sym);
  ops.l_scaled = l_scaled(ops.l_sym);
  return ops;
}

SbmProbabilities sbm_probabilities(const SbmConfig& cfg) {
  if (cfg.classes < 1) throw std::invalid_argument("sbm: classes must be >= 1");
  if (!(cfg.homophily >= 0.0 && cfg.homophily <= 1.0))
    throw std::invalid_argument("sbm: homophily must lie in [0, 1]");
  if (!(cfg.avg_degree >= 0.0 && cfg.avg_degree < static_cast<double>(cfg.n)))
    throw std::invalid_argument("sbm: avg_degree must lie in [0, n)");
  const double n = static_cast<double>(cfg.n);
  const double c = static_cast<double>(cfg.classes);
  const double block = n / c;
  const double out_share = cfg.classes > 1 ? (1.0 - cfg.homophily) / (c - 1.0) : 0.0;
  const double denom = cfg.homophily * (block - 1.0) + out_share * (n - block);
  if (denom <= 0.0) throw std::invalid_argument("sbm: degenerate block structure");
  const double scale = cfg.avg_degree / denom;
  SbmProbabilities p{cfg.homophily * scale, out_share * scale};
  if (p.p_in > 1.0 || p.p_out > 1.0) {
    throw std::invalid_argument("sbm: infeasible edge probability (p_in=" + std::to_string(p.p_in) +
                                ", p_out=" + std::to_string(p.p_out) + ")");
  }
  return p;
}

Graph generate_sbm(const SbmConfig& cfg) {
  const auto probs = sbm_probabilities(cfg);
  if (cfg.features < static_cast<std::size_t>(cfg.classes))
    throw std::invalid_argument("sbm: feature dimension must be >= classes");
  Rng rng(derive_seed(cfg.seed, "sbm"));

  Graph g;
  g.n = cfg.n;
  g.num_classes = cfg.classes;
  g.labels.resize(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) g.labels[i] = static_cast<int>(i % cfg.classes);
  std::shuffle(g.labels.begin(), g.labels.end(), rng);

  std::vector<CsrMatrix::Entry> entries;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    for (std::size_t j = i + 1; j < cfg.n; ++j) {
      const double p = g.labels[i] == g.labels[j] ? probs.p_in : probs.p_out;
      if (uniform01(rng) < p) {
        entries.push_back({i, j, 1.0});
        entries.push_back({j, i, 1.0});
      }
    }
  }
  g.adjacency = CsrMatrix::from_triplets(cfg.n, std::move(entries));

  std::normal_distribution<double> noise(0.0, 1.0);
  g.features = DenseMatrix(cfg.n, cfg.features);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    for (std::size_t f = 0; f < cfg.features; ++f) g.features(i, f) = cfg.feature_noise * noise(rng);
    g.features(i, static_cast<std::size_t>(g.labels[i])) += 1.0;
  }
  return g;
}

Graph load_graph(const std::filesystem::path& edges, const std::filesystem::path& features,
                 const std::optional<std::filesystem::path>& masks, std::optional<int> num_classes) {
  Graph g;
  std::vector<std::vector<double>> rows;
  {
    std::ifstream in(features);
    if (!in) throw std::runtime_error("cannot open features file " + features.string());
    std::string line;
    std::size_t line_no = 0;
    std::size_t width = 0;
    while (std::getline(in, line)) {
      ++line_no;
      line = strip_comment(line);
      if (blank(line)) continue;
      std::istringstream ss(line);
      std::vector<std::string> tokens;
      for (std::string tok; ss >> tok;) tokens.push_back(tok);
      if (tokens.size() < 2) parse_error(features, line_no, "expected features followed by a label");
      if (width == 0) width = tokens.size();
      if (tokens.size() != width)
        parse_error(features, line_no, "expected " + std::to_string(width) + " columns");
      std::vector<double> row;
      try {
        for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
          std::size_t used = 0;
          row.push_back(std::stod(tokens[t], &used));
          if (used != tokens[t].size()) throw std::invalid_argument(tokens[t]);
        }
        std::size_t used = 0;
        const long label = std::stol(tokens.back(), &used);
        if (used != tokens.back().size()) throw std::invalid_argument(tokens.back());
        if (label < 0 || (num_classes && label >= *num_classes))
          parse_error(features, line_no, "label " + std::to_string(label) + " out of range");
        g.labels.push_back(static_cast<int>(label));
      } catch (const std::logic_error&) {
        parse_error(features, line_no, "malformed number");
      }
      rows.push_back(std::move(row));
    }
  }
  g.n = rows.size();
  const std::size_t f = g.n == 0 ? 0 : rows.front().size();
  std::vector<double> flat;
  flat.reserve(g.n * f);
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  g.features = DenseMatrix(g.n, f, std::move(flat));
  const int max_label = g.labels.empty() ? -1 : *std::max_element(g.labels.begin(), g.labels.end());
  g.num_classes = num_classes.value_or(max_label + 1);

  std::vector<CsrMatrix::Entry> entries;
  {
    std::ifstream in(edges);
    if (!in) throw std::runtime_error("cannot open edge file " + edges.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      line = strip_comment(line);
      if (blank(line)) continue;
      std::istringstream ss(line);
      long long u = 0, v = 0;
      std::string extra;
      if (!(ss >> u >> v) || (ss >> extra)) parse_error(edges, line_no, "expected two integer node ids");
      if (u < 0 || v < 0 || static_cast<std::size_t>(u) >= g.n || static_cast<std::size_t>(v) >= g.n)
        parse_error(edges, line_no, "node id out of range [0," + std::to_string(g.n) + ")");
      if (u == v) continue;
      entries.push_back({static_cast<std::size_t>(u), static_cast<std::size_t>(v), 1.0});
      entries.push_back({static_cast<std::size_t>(v), static_cast<std::size_t>(u), 1.0});
    }
  }
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  entries.erase(std::unique(entries.begin(), entries.end(),
                            [](const auto& a, const auto& b) { return a.row == b.row && a.col == b.col; }),
                entries.end());
  g.adjacency = CsrMatrix::from_triplets(g.n, std::move(entries));

  if (masks) {
    std::ifstream in(*masks);
    if (!in) throw std::runtime_error("cannot open mask file " + masks->string());
    const auto doc = nlohmann::json::parse(in);
    Split s;
    s.train = indices_to_mask(doc.at("train"), g.n, "train");
    s.val = indices_to_mask(doc.at("val"), g.n, "val");
    s.test = indices_to_mask(doc.at("test"), g.n, "test");
    g.split = std::move(s);
  }
  g.validate();
  return g;
}

void save_graph(const Graph& g, const std::filesystem::path& edges,
                const std::filesystem::path& features, const std::optional<std::filesystem::path>& masks) {
  {
    std::ofstream out(edges);
    if (!out) throw std::runtime_error("cannot write " + edges.string());
    out << "# undirected edge list, n=" << g.n << "\n";
    const auto row_ptr = g.adjacency.row_ptr();
    const auto cols = g.adjacency.col_idx();
    for (std::size_t r = 0; r < g.n; ++r)
      for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k)
        if (cols[k] > r) out << r << ' ' << cols[k] << '\n';
  }
  {
    std::ofstream out(features);
    if (!out) throw std::runtime_error("cannot write " + features.string());
    out << std::setprecision(17);
    for (std::size_t i = 0; i < g.n; ++i) {
      for (double v : g.features.row(i)) out << v << ' ';
      out << g.labels[i] << '\n';
    }
  }
  if (masks && g.split) {
    auto to_indices = [](const Mask& m) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i]) idx.push_back(i);
      return idx;
    };
    nlohmann::json doc{{"train", to_indices(g.split->train)},
                       {"val", to_indices(g.split->val)},
                       {"test", to_indices(g.split->test)}};
    std::ofstream out(*masks);
    if (!out) throw std::runtime_error("cannot write " + masks->string());
    out << doc.dump(1) << '\n';
  }
}

std::vector<Split> make_folds(const Graph& g, int k, SplitRatios ratios, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("make_folds: k must be >= 2");
  if (!(ratios.train > 0.0 && ratios.val >= 0.0 && ratios.train + ratios.val < 1.0))
    throw std::invalid_argument("make_folds: ratios must leave a nonempty test share");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(g.num_classes));
  for (std::size_t i = 0; i < g.n; ++i) by_class[static_cast<std::size_t>(g.labels[i])].push_back(i);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() < static_cast<std::size_t>(k)) {
      throw std::invalid_argument("make_folds: class " + std::to_string(c) + " has " +
                                  std::to_string(by_class[c].size()) + " nodes, fewer than k=" +
                                  std::to_string(k));
    }
  }

  std::vector<Split> folds;
  folds.reserve(static_cast<std::size_t>(k));
  for (int fold = 0; fold < k; ++fold) {
    Rng rng(derive_seed(derive_seed(seed, "folds"), static_cast<std::uint64_t>(fold)));
    Split s{Mask(g.n, 0), Mask(g.n, 0), Mask(g.n, 0)};
    for (auto members : by_class) {
      std::shuffle(members.begin(), members.end(), rng);
      const double size = static_cast<double>(members.size());
      const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * size));
      const auto n_val = static_cast<std::size_t>(std::llround(ratios.val * size));
      for (std::size_t i = 0; i < members.size(); ++i) {
        if (i < n_train)
          s.train[members[i]] = 1;
        else if (i < n_train + n_val)
          s.val[members[i]] = 1;
        else
          s.test[members[i]] = 1;
      }
    }
    folds.push_back(std::move(s));
  }
  return folds;
}

}  // namespace hybspec
