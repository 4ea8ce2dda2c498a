#include "promise/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include <zlib.h>

namespace promise {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "little-endian host assumed");

namespace {

struct Nifti1Header {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min, slice_duration, toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
static_assert(sizeof(Nifti1Header) == 348);

enum NiftiType : int16_t {
    DT_UINT8 = 2, DT_INT16 = 4, DT_INT32 = 8, DT_FLOAT32 = 16, DT_FLOAT64 = 64,
    DT_INT8 = 256, DT_UINT16 = 512, DT_UINT32 = 768,
};

template <typename T>
void swap_in_place(T &v) {
    auto *b = reinterpret_cast<unsigned char *>(&v);
    std::reverse(b, b + sizeof(T));
}

void swap_header(Nifti1Header &h) {
    swap_in_place(h.sizeof_hdr);
    swap_in_place(h.extents);
    swap_in_place(h.session_error);
    for (auto &d : h.dim) swap_in_place(d);
    swap_in_place(h.intent_p1); swap_in_place(h.intent_p2); swap_in_place(h.intent_p3);
    swap_in_place(h.intent_code);
    swap_in_place(h.datatype);
    swap_in_place(h.bitpix);
    swap_in_place(h.slice_start);
    for (auto &p : h.pixdim) swap_in_place(p);
    swap_in_place(h.vox_offset);
    swap_in_place(h.scl_slope);
    swap_in_place(h.scl_inter);
    swap_in_place(h.slice_end);
    swap_in_place(h.cal_max); swap_in_place(h.cal_min); swap_in_place(h.slice_duration); swap_in_place(h.toffset);
    swap_in_place(h.glmax); swap_in_place(h.glmin);
    swap_in_place(h.qform_code); swap_in_place(h.sform_code);
    swap_in_place(h.quatern_b); swap_in_place(h.quatern_c); swap_in_place(h.quatern_d);
    swap_in_place(h.qoffset_x); swap_in_place(h.qoffset_y); swap_in_place(h.qoffset_z);
    for (int i = 0; i < 4; ++i) {
        swap_in_place(h.srow_x[i]); swap_in_place(h.srow_y[i]); swap_in_place(h.srow_z[i]);
    }
}

std::string read_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path &path, const std::string &bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

bool is_gzip(const std::string &bytes) {
    return bytes.size() >= 2 && static_cast<unsigned char>(bytes[0]) == 0x1f && static_cast<unsigned char>(bytes[1]) == 0x8b;
}

std::string gunzip(const std::string &in) {
    z_stream zs{};
    if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw std::runtime_error("zlib inflateInit2 failed");
    zs.next_in = reinterpret_cast<Bytef *>(const_cast<char *>(in.data()));
    zs.avail_in = static_cast<uInt>(in.size());
    std::string out;
    char buf[1 << 16];
    int ret = Z_OK;
    while (ret != Z_STREAM_END) {
        zs.next_out = reinterpret_cast<Bytef *>(buf);
        zs.avail_out = sizeof(buf);
        ret = inflate(&zs, Z_NO_FLUSH);
        if (ret != Z_OK && ret != Z_STREAM_END) {
            inflateEnd(&zs);
            throw std::runtime_error("malformed gzip stream");
        }
        out.append(buf, sizeof(buf) - zs.avail_out);
        if (ret == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
            inflateEnd(&zs);
            throw std::runtime_error("truncated gzip stream");
        }
    }
    inflateEnd(&zs);
    return out;
}

std::string gzip_bytes(const std::string &in) {
    z_stream zs{};
    if (deflateInit2(&zs, 6, Z_DEFLATED, 16 + MAX_WBITS, 8, Z_DEFAULT_STRATEGY) != Z_OK)
        throw std::runtime_error("zlib deflateInit2 failed");
    zs.next_in = reinterpret_cast<Bytef *>(const_cast<char *>(in.data()));
    zs.avail_in = static_cast<uInt>(in.size());
    std::string out;
    char buf[1 << 16];
    int ret = Z_OK;
    while (ret != Z_STREAM_END) {
        zs.next_out = reinterpret_cast<Bytef *>(buf);
        zs.avail_out = sizeof(buf);
        ret = deflate(&zs, Z_FINISH);
        out.append(buf, sizeof(buf) - zs.avail_out);
    }
    deflateEnd(&zs);
    return out;
}

template <typename T>
void convert_voxels(const char *src, std::size_t n, bool swap, double slope, double inter, std::vector<float> &dst) {
    dst.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        T v;
        std::memcpy(&v, src + i * sizeof(T), sizeof(T));
        if (swap) swap_in_place(v);
        dst[i] = static_cast<float>(static_cast<double>(v) * slope + inter);
    }
}

struct DecodedNifti {
    Shape3 shape;
    Spacing spacing;
    Origin origin;
    std::vector<float> values;
};

DecodedNifti decode_nifti_raw(const std::string &file_bytes) {
    const std::string bytes = is_gzip(file_bytes) ? gunzip(file_bytes) : file_bytes;
    if (bytes.size() < sizeof(Nifti1Header)) throw std::runtime_error("malformed NIfTI header: file too short");
    Nifti1Header h;
    std::memcpy(&h, bytes.data(), sizeof(h));
    bool swap = false;
    if (h.sizeof_hdr != 348) {
        swap_header(h);
        swap = true;
        if (h.sizeof_hdr != 348) throw std::runtime_error("malformed NIfTI header: sizeof_hdr != 348");
    }
    if (std::memcmp(h.magic, "n+1", 4) != 0 && std::memcmp(h.magic, "ni1", 4) != 0)
        throw std::runtime_error("malformed NIfTI header: bad magic");
    if (h.dim[0] < 3 || h.dim[0] > 7) throw std::runtime_error("malformed NIfTI header: dim[0] out of range");
    for (int i = 4; i <= h.dim[0]; ++i)
        if (h.dim[i] > 1) throw std::runtime_error("only 3D NIfTI volumes are supported");
    for (int i = 1; i <= 3; ++i)
        if (h.dim[i] < 1) throw std::runtime_error("malformed NIfTI header: non-positive dimension");

    DecodedNifti out;
    out.shape = {h.dim[3], h.dim[2], h.dim[1]};
    for (int i = 1; i <= 3; ++i)
        if (!(h.pixdim[i] > 0.0F)) throw std::runtime_error("malformed NIfTI header: non-positive pixdim");
    out.spacing = {h.pixdim[3], h.pixdim[2], h.pixdim[1]};
    if (h.sform_code > 0)
        out.origin = {h.srow_z[3], h.srow_y[3], h.srow_x[3]};
    else
        out.origin = {h.qoffset_z, h.qoffset_y, h.qoffset_x};

    const auto n = static_cast<std::size_t>(out.shape.numel());
    const auto offset = static_cast<std::size_t>(h.vox_offset);
    std::size_t elem = 0;
    switch (h.datatype) {
    case DT_UINT8: case DT_INT8: elem = 1; break;
    case DT_INT16: case DT_UINT16: elem = 2; break;
    case DT_INT32: case DT_UINT32: case DT_FLOAT32: elem = 4; break;
    case DT_FLOAT64: elem = 8; break;
    default: throw std::runtime_error("unsupported NIfTI datatype " + std::to_string(h.datatype));
    }
    if (offset < sizeof(Nifti1Header) || bytes.size() < offset + n * elem)
        throw std::runtime_error("malformed NIfTI: voxel data truncated");

    const bool scaled = h.scl_slope != 0.0F && std::isfinite(h.scl_slope);
    const double slope = scaled ? h.scl_slope : 1.0;
    const double inter = scaled ? h.scl_inter : 0.0;
    const char *src = bytes.data() + offset;
    switch (h.datatype) {
    case DT_UINT8: convert_voxels<uint8_t>(src, n, swap, slope, inter, out.values); break;
    case DT_INT8: convert_voxels<int8_t>(src, n, swap, slope, inter, out.values); break;
    case DT_INT16: convert_voxels<int16_t>(src, n, swap, slope, inter, out.values); break;
    case DT_UINT16: convert_voxels<uint16_t>(src, n, swap, slope, inter, out.values); break;
    case DT_INT32: convert_voxels<int32_t>(src, n, swap, slope, inter, out.values); break;
    case DT_UINT32: convert_voxels<uint32_t>(src, n, swap, slope, inter, out.values); break;
    case DT_FLOAT32: convert_voxels<float>(src, n, swap, slope, inter, out.values); break;
    case DT_FLOAT64: convert_voxels<double>(src, n, swap, slope, inter, out.values); break;
    default: break;
    }
    return out;
}

std::string encode_nifti_raw(const Shape3 &shape, const Spacing &spacing, const Origin &origin, int16_t datatype,
                             const void *voxels, std::size_t elem, bool gzip) {
    Nifti1Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    h.dim[1] = static_cast<int16_t>(shape.w);
    h.dim[2] = static_cast<int16_t>(shape.h);
    h.dim[3] = static_cast<int16_t>(shape.d);
    for (int i = 4; i < 8; ++i) h.dim[i] = 1;
    h.datatype = datatype;
    h.bitpix = static_cast<int16_t>(elem * 8);
    h.pixdim[0] = 1.0F;
    h.pixdim[1] = static_cast<float>(spacing[2]);
    h.pixdim[2] = static_cast<float>(spacing[1]);
    h.pixdim[3] = static_cast<float>(spacing[0]);
    for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0F;
    h.vox_offset = 352.0F;
    h.scl_slope = 1.0F;
    h.xyzt_units = 2; // mm
    h.qform_code = 1;
    h.sform_code = 1;
    h.qoffset_x = static_cast<float>(origin[2]);
    h.qoffset_y = static_cast<float>(origin[1]);
    h.qoffset_z = static_cast<float>(origin[0]);
    h.srow_x[0] = h.pixdim[1]; h.srow_x[3] = h.qoffset_x;
    h.srow_y[1] = h.pixdim[2]; h.srow_y[3] = h.qoffset_y;
    h.srow_z[2] = h.pixdim[3]; h.srow_z[3] = h.qoffset_z;
    std::memcpy(h.magic, "n+1", 4);

    std::string bytes(352 + static_cast<std::size_t>(shape.numel()) * elem, '\0');
    std::memcpy(bytes.data(), &h, sizeof(h));
    std::memcpy(bytes.data() + 352, voxels, static_cast<std::size_t>(shape.numel()) * elem);
    return gzip ? gzip_bytes(bytes) : bytes;
}

enum class Format { nifti, nifti_gz, raw };

Format format_of(const fs::path &path) {
    const auto name = path.filename().string();
    auto ends_with = [&](const std::string &suffix) {
        return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(".nii.gz")) return Format::nifti_gz;
    if (ends_with(".nii")) return Format::nifti;
    if (ends_with(".raw")) return Format::raw;
    throw std::invalid_argument("unrecognised volume file extension: " + path.string());
}

fs::path sidecar_of(const fs::path &raw) {
    auto p = raw;
    p.replace_extension(".json");
    return p;
}

DecodedNifti load_raw(const fs::path &path) {
    json meta;
    try {
        meta = json::parse(read_file(sidecar_of(path)));
    } catch (const json::exception &e) {
        throw std::runtime_error("malformed raw sidecar for " + path.string() + ": " + e.what());
    }
    DecodedNifti out;
    try {
        const auto shape = meta.at("shape").get<std::vector<int64_t>>();
        const auto spacing = meta.at("spacing").get<std::vector<double>>();
        const auto origin = meta.value("origin", std::vector<double>{0.0, 0.0, 0.0});
        const auto dtype = meta.value("dtype", std::string("float32"));
        if (shape.size() != 3 || spacing.size() != 3 || origin.size() != 3)
            throw std::runtime_error("shape/spacing/origin must have 3 entries");
        if (dtype != "float32") throw std::runtime_error("unsupported raw dtype '" + dtype + "'");
        out.shape = {shape[0], shape[1], shape[2]};
        out.spacing = {spacing[0], spacing[1], spacing[2]};
        out.origin = {origin[0], origin[1], origin[2]};
    } catch (const json::exception &e) {
        throw std::runtime_error("malformed raw sidecar for " + path.string() + ": " + e.what());
    }
    const auto bytes = read_file(path);
    const auto n = static_cast<std::size_t>(out.shape.numel());
    if (bytes.size() != n * sizeof(float))
        throw std::runtime_error("raw file size does not match sidecar shape " + out.shape.str());
    out.values.resize(n);
    std::memcpy(out.values.data(), bytes.data(), bytes.size());
    return out;
}

void save_raw(const Shape3 &shape, const Spacing &spacing, const Origin &origin, const std::vector<float> &values,
              const fs::path &path) {
    json meta = {{"shape", {shape.d, shape.h, shape.w}},
                 {"spacing", {spacing[0], spacing[1], spacing[2]}},
                 {"origin", {origin[0], origin[1], origin[2]}},
                 {"dtype", "float32"}};
    write_file(sidecar_of(path), meta.dump(2));
    write_file(path, std::string(reinterpret_cast<const char *>(values.data()), values.size() * sizeof(float)));
}

DecodedNifti load_any(const fs::path &path) {
    const auto fmt = format_of(path);
    if (fmt == Format::raw) return load_raw(path);
    return decode_nifti_raw(read_file(path));
}

LabelMask to_mask(DecodedNifti d) {
    LabelMask m{MaskArray3(d.shape), d.spacing, d.origin};
    auto &dst = m.data.values();
    for (std::size_t i = 0; i < d.values.size(); ++i) {
        const float v = d.values[i];
        if (v != 0.0F && v != 1.0F)
            throw std::runtime_error("label mask is not binary (found value " + std::to_string(v) + ")");
        dst[i] = v != 0.0F ? 1 : 0;
    }
    return m;
}

} // namespace

Volume decode_nifti(const std::string &bytes, const std::string &id) {
    auto d = decode_nifti_raw(bytes);
    Volume v{FloatArray3(d.shape, std::move(d.values)), d.spacing, d.origin, id};
    v.validate();
    return v;
}

std::string encode_nifti(const Volume &v, bool gzip) {
    return encode_nifti_raw(v.shape(), v.spacing, v.origin, DT_FLOAT32, v.data.data(), sizeof(float), gzip);
}

std::string encode_nifti(const LabelMask &m, bool gzip) {
    return encode_nifti_raw(m.shape(), m.spacing, m.origin, DT_UINT8, m.data.data(), 1, gzip);
}

Volume load_volume(const fs::path &path) {
    auto d = load_any(path);
    Volume v{FloatArray3(d.shape, std::move(d.values)), d.spacing, d.origin, path.stem().string()};
    if (v.id.ends_with(".nii")) v.id.resize(v.id.size() - 4);
    v.validate();
    return v;
}

LabelMask load_mask(const fs::path &path) { return to_mask(load_any(path)); }

std::pair<Volume, std::optional<LabelMask>> load_case(const fs::path &image, const std::optional<fs::path> &mask) {
    auto v = load_volume(image);
    std::optional<LabelMask> m;
    if (mask) {
        m = load_mask(*mask);
        m->validate(&v);
    }
    return {std::move(v), std::move(m)};
}

void save_volume(const Volume &v, const fs::path &path) {
    switch (format_of(path)) {
    case Format::raw: save_raw(v.shape(), v.spacing, v.origin, v.data.values(), path); break;
    case Format::nifti: write_file(path, encode_nifti(v, false)); break;
    case Format::nifti_gz: write_file(path, encode_nifti(v, true)); break;
    }
}

void save_mask(const LabelMask &m, const fs::path &path) {
    m.validate();
    switch (format_of(path)) {
    case Format::raw: {
        std::vector<float> values(m.data.values().begin(), m.data.values().end());
        save_raw(m.shape(), m.spacing, m.origin, values, path);
        break;
    }
    case Format::nifti: write_file(path, encode_nifti(m, false)); break;
    case Format::nifti_gz: write_file(path, encode_nifti(m, true)); break;
    }
}

// ---------------------------------------------------------------------------

std::string to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "train";
}

namespace {
Split split_from_string(const std::string &s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::runtime_error("manifest: unknown split '" + s + "'");
}
} // namespace

std::vector<ManifestEntry> load_manifest(const fs::path &path) {
    const auto doc = json::parse(read_file(path));
    if (!doc.is_array()) throw std::runtime_error("manifest must be a JSON list");
    const auto base = path.parent_path();
    auto resolve = [&](const std::string &p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
    std::vector<ManifestEntry> out;
    for (const auto &e : doc)
        out.push_back({resolve(e.at("image_path").get<std::string>()), resolve(e.at("mask_path").get<std::string>()),
                       split_from_string(e.at("split").get<std::string>())});
    return out;
}

void save_manifest(const std::vector<ManifestEntry> &entries, const fs::path &path) {
    json doc = json::array();
    const auto base = path.parent_path();
    for (const auto &e : entries)
        doc.push_back({{"image_path", fs::proximate(e.image_path, base).string()},
                       {"mask_path", fs::proximate(e.mask_path, base).string()},
                       {"split", to_string(e.split)}});
    write_file(path, doc.dump(2));
}

std::vector<Split> assign_splits(std::size_t n, uint64_t seed) {
    const auto n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
    std::vector<Split> splits(n, Split::test);
    for (std::size_t i = 0; i < n; ++i)
        splits[i] = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
    std::mt19937_64 rng(seed);
    std::shuffle(splits.begin(), splits.end(), rng);
    return splits;
}

} // namespace promise
