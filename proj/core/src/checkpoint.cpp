#include "sparsesplat/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace ssplat {

namespace {

using nlohmann::json;

struct TensorRef {
    std::string name;
    std::vector<std::uint32_t> shape;
    std::vector<float>* values;
};

std::uint32_t u32(std::size_t v) { return static_cast<std::uint32_t>(v); }

std::vector<TensorRef> tensors_of(Checkpoint& ck) {
    std::vector<TensorRef> out;
    auto& c = ck.cloud;
    const std::size_t n = c.size();
    out.push_back({"cloud/means", {u32(n), 3}, &c.means});
    out.push_back({"cloud/rotations", {u32(n), 4}, &c.rotations});
    out.push_back({"cloud/log_scales", {u32(n), 3}, &c.log_scales});
    out.push_back({"cloud/opacity_logits", {u32(n)}, &c.opacity_logits});
    out.push_back({"cloud/sh", {u32(n), u32(c.coeffs()), 3}, &c.sh});
    if (ck.deformation) {
        auto& f = ck.deformation->field;
        for (int l = 0; l < f.levels(); ++l)
            for (int p = 0; p < kPlaneCount; ++p) {
                const auto r = u32(f.resolutions[l]);
                out.push_back({"deformation/field/l" + std::to_string(l) + "/p" + std::to_string(p),
                               {r, r, u32(f.features)}, &f.planes[l * kPlaneCount + p]});
            }
        auto& h = ck.deformation->head;
        auto layer = [&](const std::string& name, DenseLayer<float>& d) {
            out.push_back({"deformation/head/" + name + "/weight", {u32(d.outputs), u32(d.inputs)}, &d.weight});
            out.push_back({"deformation/head/" + name + "/bias", {u32(d.outputs)}, &d.bias});
        };
        for (std::size_t i = 0; i < h.hidden.size(); ++i)
            layer("hidden" + std::to_string(i), h.hidden[i]);
        layer("position", h.position_head);
        layer("rotation", h.rotation_head);
        layer("scale", h.scale_head);
    }
    return out;
}

json vec_json(const Vec3<double>& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3<double> json_vec(const json& j) {
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

json camera_json(const CameraView& v) {
    json rot = json::array();
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            rot.push_back(v.rotation(r, c));
    return {{"id", v.id},
            {"width", v.width},
            {"height", v.height},
            {"time", v.time},
            {"intrinsics", {v.intrinsics.fx, v.intrinsics.fy, v.intrinsics.cx, v.intrinsics.cy}},
            {"rotation", rot},
            {"translation", vec_json(v.translation)}};
}

CameraView json_camera(const json& j) {
    CameraView v;
    v.id = j.at("id").get<std::string>();
    v.width = j.at("width").get<int>();
    v.height = j.at("height").get<int>();
    v.time = j.at("time").get<double>();
    const auto& k = j.at("intrinsics");
    v.intrinsics = {k.at(0).get<double>(), k.at(1).get<double>(), k.at(2).get<double>(),
                    k.at(3).get<double>()};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            v.rotation(r, c) = j.at("rotation").at(r * 3 + c).get<double>();
    v.translation = json_vec(j.at("translation"));
    return v;
}

bool same_pose(const CameraView& a, const CameraView& b) {
    return a.id == b.id && a.width == b.width && a.height == b.height && a.time == b.time &&
           a.intrinsics.fx == b.intrinsics.fx && a.intrinsics.fy == b.intrinsics.fy &&
           a.intrinsics.cx == b.intrinsics.cx && a.intrinsics.cy == b.intrinsics.cy &&
           a.rotation == b.rotation && a.translation == b.translation;
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
public:
    explicit Reader(std::string data) : data_(std::move(data)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n)
            throw Error(ErrorCode::Io, "checkpoint is truncated");
    }
    std::string data_;
    std::size_t pos_ = 0;
};

} // namespace

bool Checkpoint::operator==(const Checkpoint& other) const {
    if (iteration != other.iteration || seed != other.seed || bounds.min != other.bounds.min ||
        bounds.max != other.bounds.max || !(cloud == other.cloud) ||
        deformation.has_value() != other.deformation.has_value() || cameras.size() != other.cameras.size())
        return false;
    // The head shape only means something alongside a field.
    if (deformation && (head.hidden_width != other.head.hidden_width ||
                        head.hidden_layers != other.head.hidden_layers || !(*deformation == *other.deformation)))
        return false;
    for (std::size_t i = 0; i < cameras.size(); ++i)
        if (!same_pose(cameras[i], other.cameras[i]))
            return false;
    return true;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    Checkpoint ck = checkpoint; // tensors_of needs mutable access
    json meta;
    meta["iteration"] = ck.iteration;
    meta["seed"] = ck.seed;
    meta["bounds"] = {{"min", vec_json(ck.bounds.min)}, {"max", vec_json(ck.bounds.max)}};
    meta["sh_degree"] = ck.cloud.sh_degree;
    if (ck.deformation) {
        const auto& f = ck.deformation->field;
        meta["deformation"] = {
            {"resolutions", f.resolutions},
            {"features", f.features},
            {"bounds_min", vec_json(f.bounds_min.cast<double>())},
            {"bounds_max", vec_json(f.bounds_max.cast<double>())},
            {"hidden_width", ck.head.hidden_width},
            {"hidden_layers", ck.head.hidden_layers}};
    } else {
        meta["deformation"] = nullptr;
    }
    meta["cameras"] = json::array();
    for (const auto& c : ck.cameras)
        meta["cameras"].push_back(camera_json(c));

    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    put_u32(out, kCheckpointVersion);
    const std::string meta_text = meta.dump();
    put_u32(out, u32(meta_text.size()));
    out += meta_text;
    const auto tensors = tensors_of(ck);
    put_u32(out, u32(tensors.size()));
    for (const auto& t : tensors) {
        put_u32(out, u32(t.name.size()));
        out += t.name;
        put_u32(out, u32(t.shape.size()));
        for (auto d : t.shape)
            put_u32(out, d);
        for (float v : *t.values)
            put_u32(out, std::bit_cast<std::uint32_t>(v));
    }

    std::ofstream file(path, std::ios::binary);
    if (!file)
        throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file)
        throw Error(ErrorCode::Io, "failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file)
        throw Error(ErrorCode::MissingFile, "missing checkpoint " + path.string());
    Reader in(std::string(std::istreambuf_iterator<char>(file), {}));

    std::string magic;
    try {
        magic = in.bytes(sizeof(kCheckpointMagic));
    } catch (const Error&) {
        throw Error(ErrorCode::VersionMismatch, path.string() + " is not a checkpoint");
    }
    if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
        throw Error(ErrorCode::VersionMismatch, path.string() + " has an unknown checkpoint magic");
    const std::uint32_t version = in.u32();
    if (version != kCheckpointVersion)
        throw Error(ErrorCode::VersionMismatch, "checkpoint format version " +
                                                    std::to_string(version) + " is not supported");

    Checkpoint ck;
    json meta;
    try {
        meta = json::parse(in.bytes(in.u32()));
        ck.iteration = meta.at("iteration").get<int>();
        ck.seed = meta.at("seed").get<std::uint64_t>();
        ck.bounds.min = json_vec(meta.at("bounds").at("min"));
        ck.bounds.max = json_vec(meta.at("bounds").at("max"));
        ck.cloud = GaussianCloud<float>(meta.at("sh_degree").get<int>(), 0);
        for (const auto& c : meta.at("cameras"))
            ck.cameras.push_back(json_camera(c));
        const auto& d = meta.at("deformation");
        if (!d.is_null()) {
            EncodingConfig enc;
            enc.resolutions = d.at("resolutions").get<std::vector<int>>();
            enc.features = d.at("features").get<int>();
            enc.bounds_min = json_vec(d.at("bounds_min"));
            enc.bounds_max = json_vec(d.at("bounds_max"));
            ck.head.hidden_width = d.at("hidden_width").get<int>();
            ck.head.hidden_layers = d.at("hidden_layers").get<int>();
            ck.deformation = DeformationModel<float>::create(enc, ck.head, 0);
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Io, "checkpoint metadata is invalid: " + std::string(e.what()));
    }

    const std::uint32_t count = in.u32();
    std::map<std::string, std::pair<std::vector<std::uint32_t>, std::vector<float>>> stored;
    for (std::uint32_t t = 0; t < count; ++t) {
        std::string name = in.bytes(in.u32());
        std::vector<std::uint32_t> shape(in.u32());
        std::uint64_t total = 1;
        for (auto& d : shape) {
            d = in.u32();
            total *= d;
        }
        if (total > (1ull << 32))
            throw Error(ErrorCode::Io, "tensor '" + name + "' declares an implausible size");
        std::vector<float> values(static_cast<std::size_t>(total));
        for (auto& v : values)
            v = std::bit_cast<float>(in.u32());
        stored[name] = {std::move(shape), std::move(values)};
    }
    if (!in.done())
        throw Error(ErrorCode::Io, "checkpoint has trailing bytes");

    // Size the cloud from its means tensor, then match every expected tensor.
    const auto means = stored.find("cloud/means");
    if (means == stored.end() || means->second.first.size() != 2)
        throw Error(ErrorCode::Io, "checkpoint has no cloud/means tensor");
    ck.cloud.resize(means->second.first[0]);
    for (auto& t : tensors_of(ck)) {
        auto it = stored.find(t.name);
        if (it == stored.end())
            throw Error(ErrorCode::Io, "checkpoint is missing tensor '" + t.name + "'");
        if (it->second.first != t.shape)
            throw Error(ErrorCode::Io, "tensor '" + t.name + "' has an unexpected shape");
        *t.values = std::move(it->second.second);
        stored.erase(it);
    }
    if (!stored.empty())
        throw Error(ErrorCode::Io, "checkpoint has unexpected tensor '" + stored.begin()->first + "'");
    return ck;
}

Checkpoint make_checkpoint(const TrainState& state, const TrainConfig& config,
                           const SceneBounds& bounds, std::span<const CameraView> cameras) {
    Checkpoint ck;
    ck.iteration = state.iteration;
    ck.seed = config.seed;
    ck.bounds = bounds;
    ck.cloud = state.cloud;
    ck.deformation = state.deformation;
    ck.head = config.head;
    for (const auto& c : cameras) {
        CameraView pose = c;
        pose.gt_image.reset();
        pose.gt_depth.reset();
        pose.mask.reset();
        ck.cameras.push_back(std::move(pose));
    }
    return ck;
}

} // namespace ssplat
