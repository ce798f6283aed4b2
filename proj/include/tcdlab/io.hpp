#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tensor.hpp"

namespace tcdlab {

using json = nlohmann::json;

// Archives are JSON documents: {"metadata": {...}, "tensors": {name: {dims, data}}}.
// nlohmann/json prints doubles with round-trip precision, so reloading is bit-exact.
inline json tensor_to_json(const Tensor4& t) {
    return json{{"dims", t.dims()}, {"data", t.data()}};
}

inline Tensor4 tensor_from_json(const json& j) {
    const auto dims = j.at("dims").get<std::vector<std::size_t>>();
    if (dims.size() != 4) throw ShapeError("archived tensor must have rank 4");
    Tensor4 t(dims[0], dims[1], dims[2], dims[3]);
    auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != t.size()) throw ShapeError("archived tensor data does not match its dims");
    t.data() = std::move(data);
    return t;
}

inline json vector_to_json(const std::vector<std::size_t>& dims, const std::vector<double>& v) {
    return json{{"dims", dims}, {"data", v}};
}

inline void write_json_file(const std::filesystem::path& path, const json& j, int indent = 2) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open for writing: " + tmp);
        out << j.dump(indent) << '\n';
        if (!out) throw std::runtime_error("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("malformed JSON in " + path.string() + ": " + e.what());
    }
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Minimal leveled logger; warnings go to stderr and, when attached, to a run log file.
class Log {
public:
    static Log& instance() {
        static Log log;
        return log;
    }

    void attach(const std::filesystem::path& file) {
        std::lock_guard lock(mu_);
        file_.close();
        file_.open(file, std::ios::app);
    }
    void detach() {
        std::lock_guard lock(mu_);
        file_.close();
    }
    void set_quiet(bool q) { quiet_ = q; }

    void info(const std::string& msg) { write("info", msg, false); }
    void warn(const std::string& msg) { write("warn", msg, true); }

    std::size_t warning_count() const { return warnings_; }

private:
    void write(const char* level, const std::string& msg, bool is_warning) {
        std::lock_guard lock(mu_);
        if (is_warning) ++warnings_;
        if (file_.is_open()) file_ << '[' << level << "] " << msg << '\n';
        if (is_warning && !quiet_) std::cerr << "warning: " << msg << '\n';
    }

    std::mutex mu_;
    std::ofstream file_;
    bool quiet_ = false;
    std::size_t warnings_ = 0;
};

}  // namespace tcdlab
