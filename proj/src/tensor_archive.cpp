#include "promise/tensor_archive.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace promise {

using nlohmann::json;

namespace {

std::string dtype_name(torch::ScalarType t) {
    switch (t) {
    case torch::kFloat32: return "F32";
    case torch::kFloat64: return "F64";
    case torch::kInt64: return "I64";
    case torch::kUInt8: return "U8";
    default: throw std::invalid_argument("tensor archive: unsupported dtype " + std::string(c10::toString(t)));
    }
}

torch::ScalarType dtype_from(const std::string &name) {
    if (name == "F32") return torch::kFloat32;
    if (name == "F64") return torch::kFloat64;
    if (name == "I64") return torch::kInt64;
    if (name == "U8") return torch::kUInt8;
    throw std::runtime_error("tensor archive: unsupported dtype " + name);
}

} // namespace

const torch::Tensor &TensorArchive::at(const std::string &key) const {
    auto it = tensors.find(key);
    if (it == tensors.end()) throw std::out_of_range("tensor archive: missing key '" + key + "'");
    return it->second;
}

std::string serialize_tensor_archive(const TensorArchive &archive) {
    json header = json::object();
    std::string payload;
    for (const auto &[name, t] : archive.tensors) {
        auto c = t.detach().to(torch::kCPU).contiguous();
        const auto nbytes = static_cast<std::size_t>(c.numel()) * c.element_size();
        header[name] = {{"dtype", dtype_name(c.scalar_type())},
                        {"shape", c.sizes().vec()},
                        {"data_offsets", {payload.size(), payload.size() + nbytes}}};
        payload.append(static_cast<const char *>(c.data_ptr()), nbytes);
    }
    if (!archive.metadata.empty()) header["__metadata__"] = archive.metadata;
    std::string head = header.dump();
    while (head.size() % 8 != 0) head.push_back(' ');
    const uint64_t n = head.size();
    std::string out(8, '\0');
    std::memcpy(out.data(), &n, 8);
    out += head;
    out += payload;
    return out;
}

TensorArchive parse_tensor_archive(const std::string &bytes) {
    if (bytes.size() < 8) throw std::runtime_error("tensor archive: truncated header");
    uint64_t n = 0;
    std::memcpy(&n, bytes.data(), 8);
    if (n > bytes.size() - 8) throw std::runtime_error("tensor archive: header length exceeds file");
    json header;
    try {
        header = json::parse(bytes.substr(8, n));
    } catch (const json::exception &e) {
        throw std::runtime_error(std::string("tensor archive: malformed header: ") + e.what());
    }
    const std::size_t base = 8 + n;
    TensorArchive out;
    for (const auto &[name, entry] : header.items()) {
        if (name == "__metadata__") {
            for (const auto &[k, v] : entry.items()) out.metadata[k] = v.get<std::string>();
            continue;
        }
        const auto dtype = dtype_from(entry.at("dtype").get<std::string>());
        const auto shape = entry.at("shape").get<std::vector<int64_t>>();
        const auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
        if (offsets.size() != 2 || offsets[1] < offsets[0] || base + offsets[1] > bytes.size())
            throw std::runtime_error("tensor archive: bad offsets for '" + name + "'");
        auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
        const auto nbytes = static_cast<std::size_t>(t.numel()) * t.element_size();
        if (nbytes != offsets[1] - offsets[0])
            throw std::runtime_error("tensor archive: size mismatch for '" + name + "'");
        std::memcpy(t.data_ptr(), bytes.data() + base + offsets[0], nbytes);
        out.tensors.emplace(name, std::move(t));
    }
    return out;
}

TensorArchive load_tensor_archive(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_tensor_archive(ss.str());
}

void save_tensor_archive(const TensorArchive &archive, const std::filesystem::path &path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const auto bytes = serialize_tensor_archive(archive);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace promise
