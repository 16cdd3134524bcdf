#include "hsb/dataset_io.hpp"

#include <png.h>
#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hsb {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

uint8_t to_byte(float v) {
    return static_cast<uint8_t>(std::lround(std::fmin(std::fmax(v, 0.0f), 1.0f) * 255.0f));
}

}  // namespace

void write_png_rgb(const std::string& path, const ImageTensor& img) {
    if (img.shape.size() != 4 || img.dim(0) != 1 || img.dim(1) != 3) {
        throw IoError("write_png_rgb: expected a {1,3,H,W} tensor for " + path);
    }
    int h = img.dim(2), w = img.dim(3);
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("write_png_rgb: cannot open " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("write_png_rgb: libpng failure for " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            row[static_cast<size_t>(x) * 3 + 0] = to_byte(img.at4(0, 0, y, x));
            row[static_cast<size_t>(x) * 3 + 1] = to_byte(img.at4(0, 1, y, x));
            row[static_cast<size_t>(x) * 3 + 2] = to_byte(img.at4(0, 2, y, x));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageTensor read_png_rgb(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("read_png_rgb: cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("read_png_rgb: libpng failure for " + path);
    }
    png_init_io(png, f.get());
    png_read_info(png, info);

    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    int w = static_cast<int>(png_get_image_width(png, info));
    int h = static_cast<int>(png_get_image_height(png, info));
    if (png_get_channels(png, info) != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("read_png_rgb: " + path + " did not normalize to RGB");
    }

    ImageTensor img({1, 3, h, w});
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x) {
            img.at4(0, 0, y, x) = static_cast<float>(row[static_cast<size_t>(x) * 3 + 0]) / 255.0f;
            img.at4(0, 1, y, x) = static_cast<float>(row[static_cast<size_t>(x) * 3 + 1]) / 255.0f;
            img.at4(0, 2, y, x) = static_cast<float>(row[static_cast<size_t>(x) * 3 + 2]) / 255.0f;
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png_gray(const std::string& path, int w, int h, const std::vector<uint8_t>& pixels) {
    if (static_cast<int64_t>(pixels.size()) != static_cast<int64_t>(w) * h) {
        throw IoError("write_png_gray: pixel count mismatch for " + path);
    }
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("write_png_gray: cannot open " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("write_png_gray: libpng failure for " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h; ++y) {
        png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<size_t>(y) * w));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::vector<uint8_t> read_png_gray(const std::string& path, int& w, int& h) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("read_png_gray: cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("read_png_gray: libpng failure for " + path);
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("read_png_gray: " + path + " is not grayscale");
    }
    if (png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);

    w = static_cast<int>(png_get_image_width(png, info));
    h = static_cast<int>(png_get_image_height(png, info));
    std::vector<uint8_t> pixels(static_cast<size_t>(w) * h);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, pixels.data() + static_cast<size_t>(y) * w, nullptr);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return pixels;
}

std::vector<int64_t> rle_encode(const BoolMask& mask) {
    std::vector<int64_t> runs;
    uint8_t current = 0;
    int64_t run = 0;
    for (uint8_t v : mask.data) {
        uint8_t bit = v ? 1 : 0;
        if (bit == current) {
            ++run;
        } else {
            runs.push_back(run);
            current = bit;
            run = 1;
        }
    }
    runs.push_back(run);
    return runs;
}

BoolMask rle_decode(const std::vector<int64_t>& runs, int w, int h) {
    BoolMask mask(w, h);
    size_t pos = 0;
    uint8_t current = 0;
    for (int64_t run : runs) {
        if (run < 0 || pos + static_cast<size_t>(run) > mask.data.size()) {
            throw IoError("rle_decode: runs exceed mask size");
        }
        if (current) std::fill_n(mask.data.begin() + static_cast<int64_t>(pos), run, uint8_t(1));
        pos += static_cast<size_t>(run);
        current = 1 - current;
    }
    if (pos != mask.data.size()) throw IoError("rle_decode: runs do not cover the mask");
    return mask;
}

uint32_t crc32_of_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("crc32: cannot open " + path);
    uLong crc = crc32(0L, Z_NULL, 0);
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        crc = crc32(crc, reinterpret_cast<const Bytef*>(buf), static_cast<uInt>(in.gcount()));
        if (!in) break;
    }
    return static_cast<uint32_t>(crc);
}

void write_dataset(const std::vector<AnnotatedScene>& scenes, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");

    json ann = json::array();
    for (const AnnotatedScene& s : scenes) {
        write_png_rgb((fs::path(dir) / "images" / (s.id + ".png")).string(), s.image);
        json rec;
        rec["id"] = s.id;
        rec["domain"] = domain_name(s.domain);
        json insts = json::array();
        for (const Instance& inst : s.instances) {
            json j;
            j["class_id"] = inst.class_id;
            j["bbox"] = {inst.bx, inst.by, inst.bw, inst.bh};
            j["mask_rle"] = rle_encode(inst.gt_mask);
            j["confidence"] = static_cast<double>(inst.confidence);
            insts.push_back(std::move(j));
        }
        rec["instances"] = std::move(insts);
        ann.push_back(std::move(rec));
    }
    {
        std::ofstream out(fs::path(dir) / "annotations.json");
        if (!out) throw IoError("write_dataset: cannot write annotations.json");
        out << ann.dump(1);
    }

    json manifest;
    manifest["version"] = 1;
    manifest["count"] = scenes.size();
    json files = json::object();
    for (const AnnotatedScene& s : scenes) {
        std::string rel = "images/" + s.id + ".png";
        files[rel] = crc32_of_file((fs::path(dir) / rel).string());
    }
    files["annotations.json"] = crc32_of_file((fs::path(dir) / "annotations.json").string());
    manifest["files"] = std::move(files);
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw IoError("write_dataset: cannot write manifest.json");
    out << manifest.dump(1);
}

std::vector<AnnotatedScene> read_dataset(const std::string& dir) {
    json manifest;
    {
        std::ifstream in(fs::path(dir) / "manifest.json");
        if (!in) throw IoError("read_dataset: missing manifest.json in " + dir);
        try {
            in >> manifest;
        } catch (const json::exception& e) {
            throw IoError(std::string("read_dataset: malformed manifest.json: ") + e.what());
        }
    }
    if (!manifest.contains("files") || !manifest["files"].is_object()) {
        throw IoError("read_dataset: manifest.json lacks a files table");
    }
    for (const auto& [rel, crc] : manifest["files"].items()) {
        fs::path p = fs::path(dir) / rel;
        if (!fs::exists(p)) throw IoError("read_dataset: manifest entry '" + rel + "' is missing");
        uint32_t actual = crc32_of_file(p.string());
        if (actual != crc.get<uint32_t>()) {
            throw IoError("read_dataset: checksum mismatch for '" + rel + "'");
        }
    }

    json ann;
    {
        std::ifstream in(fs::path(dir) / "annotations.json");
        if (!in) throw IoError("read_dataset: missing annotations.json in " + dir);
        try {
            in >> ann;
        } catch (const json::exception& e) {
            throw IoError(std::string("read_dataset: malformed annotations.json: ") + e.what());
        }
    }
    if (!ann.is_array()) throw IoError("read_dataset: annotations.json must be an array");

    std::vector<AnnotatedScene> scenes;
    scenes.reserve(ann.size());
    for (const json& rec : ann) {
        AnnotatedScene s;
        try {
            s.id = rec.at("id").get<std::string>();
            s.domain = domain_from_name(rec.at("domain").get<std::string>());
        } catch (const json::exception& e) {
            throw IoError(std::string("read_dataset: bad annotation record: ") + e.what());
        }
        std::string rel = "images/" + s.id + ".png";
        fs::path img_path = fs::path(dir) / rel;
        if (!fs::exists(img_path)) {
            throw IoError("read_dataset: annotation '" + s.id + "' points at missing " + rel);
        }
        s.image = read_png_rgb(img_path.string());
        int w = s.width(), h = s.height();
        for (const json& j : rec.at("instances")) {
            Instance inst;
            try {
                inst.class_id = j.at("class_id").get<int>();
                const json& bb = j.at("bbox");
                inst.bx = bb.at(0).get<int>();
                inst.by = bb.at(1).get<int>();
                inst.bw = bb.at(2).get<int>();
                inst.bh = bb.at(3).get<int>();
                inst.gt_mask = rle_decode(j.at("mask_rle").get<std::vector<int64_t>>(), w, h);
                inst.confidence = static_cast<float>(j.at("confidence").get<double>());
            } catch (const json::exception& e) {
                throw IoError("read_dataset: bad instance in '" + s.id + "': " + e.what());
            }
            s.instances.push_back(std::move(inst));
        }
        scenes.push_back(std::move(s));
    }
    return scenes;
}

}  // namespace hsb
