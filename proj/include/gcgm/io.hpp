#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "gcgm/birdsim.hpp"
#include "gcgm/counts.hpp"
#include "gcgm/error.hpp"
#include "gcgm/tree_model.hpp"

namespace gcgm {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Model files
//
// {
//   "node_count": 3, "domain_size": 2, "root": 0,
//   "edges": [[0, 1], [1, 2]],
//   "log_potentials": [ [[a, b], [c, d]], ... ],   // one L x L table per edge, rows = first endpoint
//   "root_log_potential": [r0, r1]                  // optional
// }
// ---------------------------------------------------------------------------

inline Json model_to_json(const TreeModel& m) {
    Json j;
    j["node_count"] = m.node_count;
    j["domain_size"] = m.domain_size;
    j["root"] = m.root;
    Json edges = Json::array();
    for (const auto& [u, v] : m.edges) edges.push_back({u, v});
    j["edges"] = edges;
    Json tables = Json::array();
    for (const Matrix& t : m.log_potentials) {
        Json rows = Json::array();
        for (Eigen::Index i = 0; i < t.rows(); ++i) {
            Json row = Json::array();
            for (Eigen::Index k = 0; k < t.cols(); ++k) row.push_back(t(i, k));
            rows.push_back(row);
        }
        tables.push_back(rows);
    }
    j["log_potentials"] = tables;
    if (m.root_log_potential) {
        Json r = Json::array();
        for (Eigen::Index i = 0; i < m.root_log_potential->size(); ++i) r.push_back((*m.root_log_potential)(i));
        j["root_log_potential"] = r;
    }
    return j;
}

namespace detail {

template <class T>
T field(const Json& j, const std::string& name) {
    if (!j.contains(name)) throw Error(ErrorCode::ParseError, "missing field '" + name + "'");
    try {
        return j.at(name).get<T>();
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorCode::ParseError, "field '" + name + "': " + ex.what());
    }
}

inline double number_at(const Json& j, const std::string& where) {
    if (!j.is_number()) throw Error(ErrorCode::ParseError, "field '" + where + "': expected a number");
    return j.get<double>();
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, path.string() + ": cannot open for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, path.string() + ": cannot open for writing");
    out << text;
    if (!out) throw Error(ErrorCode::IoError, path.string() + ": write failed");
}

}  // namespace detail

inline TreeModel model_from_json(const Json& j) {
    if (!j.is_object()) throw Error(ErrorCode::ParseError, "model document must be an object");
    TreeModel m;
    m.node_count = detail::field<int>(j, "node_count");
    m.domain_size = detail::field<int>(j, "domain_size");
    m.root = j.contains("root") ? detail::field<int>(j, "root") : 0;
    const Json& edges = j.contains("edges") ? j.at("edges") : Json::array();
    if (!edges.is_array()) throw Error(ErrorCode::ParseError, "field 'edges': expected an array");
    for (std::size_t e = 0; e < edges.size(); ++e) {
        const std::string where = "edges[" + std::to_string(e) + "]";
        if (!edges[e].is_array() || edges[e].size() != 2 || !edges[e][0].is_number_integer() ||
            !edges[e][1].is_number_integer()) {
            throw Error(ErrorCode::ParseError, "field '" + where + "': expected a pair of integers");
        }
        m.edges.emplace_back(edges[e][0].get<int>(), edges[e][1].get<int>());
    }
    const Json& tables = j.contains("log_potentials") ? j.at("log_potentials") : Json::array();
    if (!tables.is_array()) throw Error(ErrorCode::ParseError, "field 'log_potentials': expected an array");
    for (std::size_t e = 0; e < tables.size(); ++e) {
        const Json& t = tables[e];
        const std::string where = "log_potentials[" + std::to_string(e) + "]";
        if (!t.is_array()) throw Error(ErrorCode::ParseError, "field '" + where + "': expected an array of rows");
        const auto rows = static_cast<Eigen::Index>(t.size());
        const auto cols = rows > 0 && t[0].is_array() ? static_cast<Eigen::Index>(t[0].size()) : 0;
        Matrix table(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i) {
            if (!t[i].is_array() || static_cast<Eigen::Index>(t[i].size()) != cols) {
                throw Error(ErrorCode::ParseError, "field '" + where + "': ragged rows");
            }
            for (Eigen::Index k = 0; k < cols; ++k) {
                table(i, k) = detail::number_at(t[i][k], where + "[" + std::to_string(i) + "][" + std::to_string(k) + "]");
            }
        }
        m.log_potentials.push_back(std::move(table));
    }
    if (j.contains("root_log_potential") && !j.at("root_log_potential").is_null()) {
        const Json& r = j.at("root_log_potential");
        if (!r.is_array()) throw Error(ErrorCode::ParseError, "field 'root_log_potential': expected an array");
        Vector v(static_cast<Eigen::Index>(r.size()));
        for (std::size_t i = 0; i < r.size(); ++i) {
            v(static_cast<Eigen::Index>(i)) = detail::number_at(r[i], "root_log_potential[" + std::to_string(i) + "]");
        }
        m.root_log_potential = std::move(v);
    }
    validate_tree(m);
    return m;
}

/// Parses a JSON document; syntax errors carry the line number.
inline Json parse_json(const std::string& text, const std::string& source) {
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::parse_error& ex) {
        const std::size_t upto = std::min(ex.byte, text.size());
        const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
        throw Error(ErrorCode::ParseError, source + ": line " + std::to_string(line) + ": " + ex.what());
    }
}

inline TreeModel read_model(const std::filesystem::path& path) {
    const Json j = parse_json(detail::read_text(path), path.string());
    try {
        return model_from_json(j);
    } catch (const Error& ex) {
        if (ex.code() == ErrorCode::ParseError) throw Error(ErrorCode::ParseError, path.string() + ": " + ex.what());
        throw;
    }
}

inline void write_model(const std::filesystem::path& path, const TreeModel& m) {
    detail::write_text(path, model_to_json(m).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Columnar text
//
//   # format: gcgm-columnar/1
//   # config: {...}            resolved configuration, one JSON line
//   block,id,i,j,value
//   node,0,1,,42
//   edge,0,1,2,17
//
// `id` is a node or edge index (or step for wind); `j` is empty for vectors.
// ---------------------------------------------------------------------------

inline constexpr const char* kColumnarFormat = "gcgm-columnar/1";

struct ColumnarRow {
    std::string block;
    int id = 0;
    int i = 0;
    int j = -1;
    double value = 0.0;
};

struct Columnar {
    Json config = Json::object();
    std::vector<ColumnarRow> rows;
};

inline std::string format_number(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string columnar_to_string(const Columnar& c) {
    std::string out = std::string("# format: ") + kColumnarFormat + "\n";
    out += "# config: " + c.config.dump() + "\n";
    out += "block,id,i,j,value\n";
    for (const ColumnarRow& r : c.rows) {
        out += r.block + "," + std::to_string(r.id) + "," + std::to_string(r.i) + "," +
               (r.j >= 0 ? std::to_string(r.j) : std::string()) + "," + format_number(r.value) + "\n";
    }
    return out;
}

inline Columnar columnar_from_string(const std::string& text, const std::string& source) {
    Columnar c;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    bool saw_format = false;
    bool saw_header = false;
    const auto fail = [&](const std::string& msg) {
        throw Error(ErrorCode::ParseError, source + ": line " + std::to_string(line_no) + ": " + msg);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            const std::string body = line.substr(1);
            const auto colon = body.find(':');
            if (colon == std::string::npos) continue;
            std::string key = body.substr(0, colon);
            key.erase(0, key.find_first_not_of(' '));
            const std::string value = body.substr(colon + 1);
            if (key == "format") {
                std::string v = value;
                v.erase(0, v.find_first_not_of(' '));
                if (v != kColumnarFormat) fail("unsupported format '" + v + "'");
                saw_format = true;
            } else if (key == "config") {
                try {
                    c.config = Json::parse(value);
                } catch (const nlohmann::json::exception& ex) {
                    fail(std::string("bad config header: ") + ex.what());
                }
            }
            continue;
        }
        if (!saw_header) {
            if (line != "block,id,i,j,value") fail("expected header 'block,id,i,j,value'");
            saw_header = true;
            continue;
        }
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.emplace_back();
        if (cells.size() != 5) fail("expected 5 comma-separated fields");
        ColumnarRow r;
        r.block = cells[0];
        const auto parse_int = [&](const std::string& s, int& out, const char* name) {
            const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
            if (res.ec != std::errc() || res.ptr != s.data() + s.size()) fail(std::string("bad integer in field '") + name + "'");
        };
        parse_int(cells[1], r.id, "id");
        parse_int(cells[2], r.i, "i");
        if (cells[3].empty()) {
            r.j = -1;
        } else {
            parse_int(cells[3], r.j, "j");
        }
        const auto res = std::from_chars(cells[4].data(), cells[4].data() + cells[4].size(), r.value);
        if (res.ec != std::errc() || res.ptr != cells[4].data() + cells[4].size()) fail("bad number in field 'value'");
        c.rows.push_back(std::move(r));
    }
    if (!saw_format) throw Error(ErrorCode::ParseError, source + ": missing '# format:' line");
    if (!saw_header) throw Error(ErrorCode::ParseError, source + ": missing column header");
    return c;
}

inline void write_columnar(const std::filesystem::path& path, const Columnar& c) {
    detail::write_text(path, columnar_to_string(c));
}

inline Columnar read_columnar(const std::filesystem::path& path) {
    return columnar_from_string(detail::read_text(path), path.string());
}

// ---------------------------------------------------------------------------
// Typed views over the columnar format
// ---------------------------------------------------------------------------

inline void append_vectors(Columnar& c, const std::string& block, const std::vector<Vector>& values) {
    for (std::size_t u = 0; u < values.size(); ++u) {
        for (Eigen::Index i = 0; i < values[u].size(); ++i) {
            c.rows.push_back({block, static_cast<int>(u), static_cast<int>(i), -1, values[u](i)});
        }
    }
}

inline void append_tables(Columnar& c, const std::string& block, const std::vector<Matrix>& values) {
    for (std::size_t e = 0; e < values.size(); ++e) {
        for (Eigen::Index i = 0; i < values[e].rows(); ++i) {
            for (Eigen::Index k = 0; k < values[e].cols(); ++k) {
                c.rows.push_back({block, static_cast<int>(e), static_cast<int>(i), static_cast<int>(k), values[e](i, k)});
            }
        }
    }
}

inline void append_observations(Columnar& c, const ObservationSet& y) {
    for (std::size_t u = 0; u < y.values.size(); ++u) {
        if (!y.values[u]) continue;
        for (Eigen::Index i = 0; i < y.values[u]->size(); ++i) {
            c.rows.push_back({"obs", static_cast<int>(u), static_cast<int>(i), -1, (*y.values[u])(i)});
        }
    }
}

/// Vectors of one block, sized from the largest indices present.
inline std::vector<Vector> extract_vectors(const Columnar& c, const std::string& block, int count, int length) {
    std::vector<Vector> out(count, Vector::Zero(length));
    for (const ColumnarRow& r : c.rows) {
        if (r.block != block) continue;
        if (r.id < 0 || r.id >= count || r.i < 0 || r.i >= length) {
            throw Error(ErrorCode::ParseError, "block '" + block + "': index outside the expected shape");
        }
        out[r.id](r.i) = r.value;
    }
    return out;
}

inline std::vector<Matrix> extract_tables(const Columnar& c, const std::string& block, int count, int rows, int cols) {
    std::vector<Matrix> out(count, Matrix::Zero(rows, cols));
    for (const ColumnarRow& r : c.rows) {
        if (r.block != block) continue;
        if (r.id < 0 || r.id >= count || r.i < 0 || r.i >= rows || r.j < 0 || r.j >= cols) {
            throw Error(ErrorCode::ParseError, "block '" + block + "': index outside the expected shape");
        }
        out[r.id](r.i, r.j) = r.value;
    }
    return out;
}

inline ObservationSet extract_observations(const Columnar& c, int node_count, int L, const NoiseModel& noise) {
    ObservationSet y = ObservationSet::none(node_count, noise);
    for (const ColumnarRow& r : c.rows) {
        if (r.block != "obs") continue;
        if (r.id < 0 || r.id >= node_count || r.i < 0 || r.i >= L) {
            throw Error(ErrorCode::ParseError, "block 'obs': index outside the expected shape");
        }
        if (!y.values[r.id]) y.values[r.id] = Vector::Zero(L);
        (*y.values[r.id])(r.i) = r.value;
    }
    return y;
}

inline Json noise_to_json(const NoiseModel& noise) {
    return Json{{"kind", to_string(noise.kind)}, {"parameter", noise.parameter}};
}

inline NoiseModel noise_from_string(const std::string& kind, double parameter) {
    if (kind == "exact") return NoiseModel::exact();
    if (kind == "gaussian") return NoiseModel::gaussian(parameter);
    if (kind == "poisson") return NoiseModel::poisson(parameter);
    throw Error(ErrorCode::InvalidArgument, "unknown noise kind '" + kind + "'");
}

inline NoiseModel noise_from_json(const Json& j) {
    return noise_from_string(detail::field<std::string>(j, "kind"), detail::field<double>(j, "parameter"));
}

inline Json grid_config_to_json(const GridConfig& g) {
    Json wind = Json::array();
    for (const Wind& v : g.wind) wind.push_back({v[0], v[1]});
    return Json{{"side", g.side},
                {"horizon", g.horizon},
                {"w", {g.w(0), g.w(1), g.w(2), g.w(3)}},
                {"lambda", g.lambda},
                {"N", g.N},
                {"seed", g.seed},
                {"wind", wind}};
}

inline GridConfig grid_config_from_json(const Json& j) {
    GridConfig g;
    g.side = detail::field<int>(j, "side");
    g.horizon = detail::field<int>(j, "horizon");
    const auto w = detail::field<std::vector<double>>(j, "w");
    if (w.size() != 4) throw Error(ErrorCode::ParseError, "field 'w': expected 4 numbers");
    g.w = Weights(w[0], w[1], w[2], w[3]);
    g.lambda = detail::field<double>(j, "lambda");
    g.N = detail::field<std::int64_t>(j, "N");
    g.seed = detail::field<std::uint64_t>(j, "seed");
    if (j.contains("wind")) {
        for (const auto& v : detail::field<std::vector<std::vector<double>>>(j, "wind")) {
            if (v.size() != 2) throw Error(ErrorCode::ParseError, "field 'wind': expected pairs");
            g.wind.push_back({v[0], v[1]});
        }
    }
    g.validate();
    return g;
}

/// Dataset as columnar text: true counts (node, edge), observations (obs),
/// with the grid configuration and noise in the config header.
inline Columnar dataset_to_columnar(const Dataset& ds, Json extra = Json::object()) {
    Columnar c;
    c.config = std::move(extra);
    c.config["grid"] = grid_config_to_json(ds.config);
    c.config["noise"] = noise_to_json(ds.observations.noise);
    std::vector<Vector> nodes;
    for (const CountVec& v : ds.counts.node_counts) nodes.push_back(v.cast<double>());
    std::vector<Matrix> edges;
    for (const CountTable& t : ds.counts.edge_counts) edges.push_back(t.cast<double>());
    append_vectors(c, "node", nodes);
    append_tables(c, "edge", edges);
    append_observations(c, ds.observations);
    return c;
}

inline Dataset dataset_from_columnar(const Columnar& c) {
    if (!c.config.contains("grid") || !c.config.at("grid").is_object()) {
        throw Error(ErrorCode::ParseError, "field 'grid': expected the grid configuration object");
    }
    Dataset ds;
    ds.config = grid_config_from_json(c.config.at("grid"));
    const int T = ds.config.horizon;
    const int L = ds.config.cells();
    const NoiseModel noise =
        c.config.contains("noise") ? noise_from_json(c.config.at("noise")) : NoiseModel::poisson(ds.config.lambda);
    ds.counts.N = ds.config.N;
    for (const Vector& v : extract_vectors(c, "node", T, L)) ds.counts.node_counts.push_back(v.cast<std::int64_t>());
    for (const Matrix& m : extract_tables(c, "edge", T - 1, L, L)) ds.counts.edge_counts.push_back(m.cast<std::int64_t>());
    ds.observations = extract_observations(c, T, L, noise);
    return ds;
}

/// Posterior mean estimates: node_mean and edge_mean blocks.
inline Columnar estimates_to_columnar(const std::vector<Vector>& nodes, const std::vector<Matrix>& edges, Json config) {
    Columnar c;
    c.config = std::move(config);
    append_vectors(c, "node_mean", nodes);
    append_tables(c, "edge_mean", edges);
    return c;
}

/// Block rows of a columnar file in a stable order, for comparisons.
inline std::vector<double> block_values(const Columnar& c, const std::string& block) {
    std::vector<std::tuple<int, int, int, double>> rows;
    for (const ColumnarRow& r : c.rows) {
        if (r.block == block) rows.emplace_back(r.id, r.i, r.j, r.value);
    }
    std::sort(rows.begin(), rows.end());
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(std::get<3>(r));
    return out;
}

}  // namespace gcgm
