#include "dreg/io.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>

namespace dreg::io {

namespace {

std::string read_all(std::ifstream& in, std::size_t n, const char* what) {
    std::string buf(n, '\0');
    in.read(buf.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw io_error(std::string("truncated ") + what);
    return buf;
}

// [8-byte ASCII decimal header length][JSON header][\n][payload]
void write_header(std::ofstream& out, const nlohmann::json& header) {
    const std::string doc = header.dump();
    char len[9];
    std::snprintf(len, sizeof len, "%08zu", doc.size());
    out.write(len, 8);
    out.write(doc.data(), static_cast<std::streamsize>(doc.size()));
    out.put('\n');
}

nlohmann::json read_header(std::ifstream& in) {
    const std::string len = read_all(in, 8, "header length");
    std::size_t n = 0;
    for (char c : len) {
        if (c < '0' || c > '9')
            throw io_error("header length is not ASCII decimal");
        n = n * 10 + static_cast<std::size_t>(c - '0');
    }
    const std::string doc = read_all(in, n, "header");
    if (in.get() != '\n') throw io_error("missing newline after header");
    nlohmann::json h = nlohmann::json::parse(doc, nullptr, false);
    if (h.is_discarded()) throw io_error("header is not valid JSON");
    return h;
}

void write_payload(std::ofstream& out, const std::vector<double>& data,
                   Dtype dtype) {
    if (dtype == Dtype::f64) {
        out.write(reinterpret_cast<const char*>(data.data()),
                  static_cast<std::streamsize>(data.size() * sizeof(double)));
    } else {
        std::vector<float> f(data.begin(), data.end());
        out.write(reinterpret_cast<const char*>(f.data()),
                  static_cast<std::streamsize>(f.size() * sizeof(float)));
    }
}

std::vector<double> read_payload(std::ifstream& in, std::size_t count,
                                 Dtype dtype) {
    if (dtype == Dtype::f64) {
        std::vector<double> d(count);
        in.read(reinterpret_cast<char*>(d.data()),
                static_cast<std::streamsize>(count * sizeof(double)));
        if (static_cast<std::size_t>(in.gcount()) != count * sizeof(double))
            throw io_error("truncated payload");
        return d;
    }
    std::vector<float> f(count);
    in.read(reinterpret_cast<char*>(f.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float))
        throw io_error("truncated payload");
    return std::vector<double>(f.begin(), f.end());
}

}  // namespace

std::string dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

Dtype dtype_from_name(const std::string& name) {
    if (name == "f32") return Dtype::f32;
    if (name == "f64") return Dtype::f64;
    throw io_error("unknown dtype: " + name);
}

void write_tensor(const std::string& path, const ad::Tensor& t, Dtype dtype,
                  const nlohmann::json& meta) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    nlohmann::json header{{"dtype", dtype_name(dtype)},
                          {"shape", t.shape},
                          {"order", "C"},
                          {"meta", meta}};
    write_header(out, header);
    write_payload(out, t.data, dtype);
    if (!out) throw io_error("write failed: " + path);
}

LoadedTensor read_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open for reading: " + path);
    nlohmann::json h = read_header(in);
    if (!h.contains("dtype") || !h.contains("shape") || !h.contains("order"))
        throw io_error("tensor header is missing required fields");
    if (h.at("order").get<std::string>() != "C")
        throw io_error("unsupported element order");
    LoadedTensor lt;
    lt.dtype = dtype_from_name(h.at("dtype").get<std::string>());
    lt.meta = h.value("meta", nlohmann::json::object());
    std::vector<int> shape = h.at("shape").get<std::vector<int>>();
    const std::size_t count = ad::Tensor::element_count(shape);
    lt.tensor = ad::Tensor(std::move(shape), read_payload(in, count, lt.dtype));
    return lt;
}

void write_checkpoint(const std::string& path, const ModelParams& params,
                      const nlohmann::json& config) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    nlohmann::json tensors = nlohmann::json::array();
    for (const std::string& name : params.order)
        tensors.push_back({{"name", name}, {"shape", params.at(name).shape}});
    write_header(out, nlohmann::json{{"config", config},
                                     {"tensors", tensors},
                                     {"dtype", "f64"}});
    for (const std::string& name : params.order)
        write_payload(out, params.at(name).data, Dtype::f64);
    if (!out) throw io_error("write failed: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open for reading: " + path);
    nlohmann::json h = read_header(in);
    if (!h.contains("tensors") || !h.contains("config"))
        throw io_error("checkpoint header is missing required fields");
    Checkpoint ck;
    ck.config = h.at("config");
    for (const nlohmann::json& entry : h.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        const std::size_t count = ad::Tensor::element_count(shape);
        ck.params.order.push_back(name);
        ck.params.values.emplace(
            name,
            ad::Tensor(std::move(shape), read_payload(in, count, Dtype::f64)));
    }
    return ck;
}

std::string format_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void write_report(const std::string& path,
                  const std::vector<std::pair<std::string, double>>& entries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    for (const auto& [key, value] : entries)
        out << key << '=' << format_number(value) << '\n';
    if (!out) throw io_error("write failed: " + path);
}

std::map<std::string, double> read_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open for reading: " + path);
    std::map<std::string, double> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw io_error("malformed report line: " + line);
        out[line.substr(0, eq)] = std::stod(line.substr(eq + 1));
    }
    return out;
}

}  // namespace dreg::io
